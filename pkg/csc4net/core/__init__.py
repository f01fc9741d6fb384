"""Settings, logging, errors and worker pools."""
