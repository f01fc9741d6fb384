"""
CSC-l4 network: layered encoding, associator learning, the joint loss,
training and cross-modal synthesis.

Training schedule per epoch, for every layer in order:

  1. MSP for the source bank (warm-started from the previous epoch)
  2. MSP for the target bank
  3. encode both modalities and apply IUN
  4. update P by weighted least squares over per-position code columns
  5. damped manifold-reweighted correction of P

followed by evaluating every loss component on a fixed set of batches. An
update that raises the combined loss is pulled back toward the previous
associators, or dropped for the previous epoch's layers.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import structlog
from scipy.special import softmax

from ..core.exceptions import (
    Csc4NetError,
    DegenerateInputError,
    DimensionError,
    TrainingError,
    UntrainedModelError,
)
from ..models.state import Associator, EpochRecord, LayerState, LossComponents, ModelState
from ..models.tensors import FilterBank, Image2, as_float_array, unwrap
from ..schemas.config import Correspondence, ModelConfig
from .coders import BaseCoder, build_coders
from .discrepancy import multilayer_mmd, product_kernel_logits, vectorize
from .l4_solver import l4_norm4
from .manifold import apply_associator, manifold_loss, pair_distances
from .normalization import iun_scalars

logger = structlog.get_logger(__name__)

CONDITION_WARNING = 1e10
# fractions of an associator update tried when the full update raises the loss
BACKTRACK_STEPS = (0.5, 0.25, 0.125)
EVAL_STREAM = 1

EpochCallback = Callable[[EpochRecord], None]


@dataclass
class EncodedBatch:
    """Per-layer codes of one batch: raw, normalized and the IUN scalars"""
    raw: List[List[np.ndarray]]
    codes: List[List[np.ndarray]]
    scalars: List[List[float]]

    @property
    def top(self) -> List[np.ndarray]:
        return self.codes[-1]


# ----------------------------------------------------------------------------
# Forward / decode
# ----------------------------------------------------------------------------

def normalize_codes(raw: Sequence[np.ndarray], config: ModelConfig) -> Tuple[List[np.ndarray], List[float]]:
    if not config.use_iun:
        return [np.asarray(z, dtype=np.float64) for z in raw], [1.0] * len(raw)
    scalars = iun_scalars(raw, config.iun)
    return [s * z for s, z in zip(scalars, raw)], scalars


def forward_layer(inputs: Sequence[np.ndarray], coder: BaseCoder, bank: FilterBank,
                  config: ModelConfig) -> Tuple[List[np.ndarray], List[np.ndarray], List[float]]:
    """Encode a batch through one layer, then IUN across the batch.

    Returns (normalized codes, raw codes, scalars).
    """
    raw = coder.encode_batch(inputs, bank)
    codes, scalars = normalize_codes(raw, config)
    return codes, raw, scalars


def forward(images: Sequence[np.ndarray], coders: Sequence[BaseCoder], banks: Sequence[FilterBank],
            config: ModelConfig) -> EncodedBatch:
    """Run a batch of images through the whole stack."""
    inputs = [np.asarray(x, dtype=np.float64)[np.newaxis] if np.ndim(x) == 2 else x for x in images]
    batch = EncodedBatch(raw=[], codes=[], scalars=[])
    for coder, bank in zip(coders, banks):
        codes, raw, scalars = forward_layer(inputs, coder, bank, config)
        batch.raw.append(raw)
        batch.codes.append(codes)
        batch.scalars.append(scalars)
        inputs = codes
    return batch


def decode_stack(top_code: np.ndarray, coders: Sequence[BaseCoder], banks: Sequence[FilterBank],
                 scalars: Sequence[float]) -> np.ndarray:
    """Undo normalization and decode layer by layer down to an (H, W) image."""
    v = np.asarray(top_code, dtype=np.float64)
    for coder, bank, s in zip(reversed(coders), reversed(banks), reversed(scalars)):
        v = coder.decode(v / s, bank)
    return v[0]


# ----------------------------------------------------------------------------
# Associator
# ----------------------------------------------------------------------------

@dataclass
class NormalEquations:
    gram: np.ndarray
    cross: np.ndarray
    target_energy: float

    def __iadd__(self, other: "NormalEquations") -> "NormalEquations":
        self.gram += other.gram
        self.cross += other.cross
        self.target_energy += other.target_energy
        return self


def _columns(codes: Sequence[np.ndarray]) -> List[np.ndarray]:
    return [np.asarray(z, dtype=np.float64).reshape(np.shape(z)[0], -1) for z in codes]


def normal_equations(codes_x: Sequence[np.ndarray], codes_y: Sequence[np.ndarray],
                     weights: np.ndarray) -> NormalEquations:
    xs = _columns(codes_x)
    ys = _columns(codes_y)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(xs), len(ys)):
        raise DimensionError(f"weights {w.shape} do not match {len(xs)} x {len(ys)} pairs")
    if xs[0].shape != ys[0].shape:
        raise DimensionError(f"source codes {xs[0].shape} and target codes {ys[0].shape} differ in layout")
    if np.any(w < 0) or not np.sum(w) > 0:
        raise DegenerateInputError("pair weights must be non-negative with a positive sum")

    k = xs[0].shape[0]
    gram = np.zeros((k, k))
    cross = np.zeros((k, k))
    row_mass = w.sum(axis=1)
    col_mass = w.sum(axis=0)
    for i, x in enumerate(xs):
        if row_mass[i] == 0:
            continue
        y_bar = sum(w[i, j] * y for j, y in enumerate(ys) if w[i, j] != 0)
        gram += row_mass[i] * (x @ x.T)
        cross += y_bar @ x.T
    energy = float(sum(col_mass[j] * np.sum(y * y) for j, y in enumerate(ys)))
    return NormalEquations(gram, cross, energy)


def solve_associator(eq: NormalEquations, ridge: float) -> Associator:
    k = eq.gram.shape[0]
    system = eq.gram + ridge * np.eye(k)
    condition = float(np.linalg.cond(system))
    if condition > CONDITION_WARNING:
        logger.warning("associator_ill_conditioned", condition=condition, ridge=ridge)
    if math.isfinite(condition) and condition < 1e14:
        p = scipy.linalg.solve(system, eq.cross.T, assume_a="sym").T
    else:
        p = np.linalg.lstsq(system, eq.cross.T, rcond=None)[0].T
    residual = eq.target_energy - 2.0 * float(np.sum(p * eq.cross)) + float(np.sum((p @ eq.gram) * p))
    return Associator(p, ridge=ridge, condition=condition, residual=max(residual, 0.0))


def update_associator(codes_x: Sequence[np.ndarray], codes_y: Sequence[np.ndarray],
                      weights: np.ndarray, ridge: float) -> Associator:
    """P = argmin sum_ij w_ij ||y_j - P x_i||^2 + ridge ||P||_F^2 over code columns."""
    return solve_associator(normal_equations(codes_x, codes_y, weights), ridge)


def correspondence_weights(stack_x: Sequence[Sequence[np.ndarray]], stack_y: Sequence[Sequence[np.ndarray]],
                           associators: Sequence[np.ndarray], config: ModelConfig) -> np.ndarray:
    """Row-normalized pair weights between source and target samples.

    ``soft_kernel`` uses the product Gaussian kernel between P-mapped source
    codes and target codes over the given layers; with the discrepancy
    module switched off every target gets the same weight.
    """
    s = len(stack_x[0])
    t = len(stack_y[0])
    if config.correspondence == Correspondence.FIXED_PAIRS:
        if s != t:
            raise DimensionError(f"fixed pairs need equal batch sizes ({s} vs {t})")
        return np.eye(s)
    if not config.use_mmd:
        return np.full((s, t), 1.0 / t)
    mapped = [vectorize([apply_associator(p, z) for z in layer]) for p, layer in zip(associators, stack_x)]
    targets = [vectorize(layer) for layer in stack_y]
    return softmax(product_kernel_logits(mapped, targets, config.kernel), axis=1)


def manifold_reweighted(stack_x: Sequence[Sequence[np.ndarray]], stack_y: Sequence[Sequence[np.ndarray]],
                        associators: Sequence[np.ndarray], weights: np.ndarray,
                        config: ModelConfig) -> np.ndarray:
    """Pair weights damped by exp(-d_ij / median d) and re-normalized per row."""
    distance = None
    for p, layer_x, layer_y in zip(associators, stack_x, stack_y):
        d = pair_distances(layer_x, layer_y, p, config.manifold)
        distance = d if distance is None else distance * d
    scale = float(np.median(distance))
    if not scale > 0:
        return weights
    rescored = weights * np.exp(-distance / scale)
    mass = rescored.sum(axis=1, keepdims=True)
    return np.where(mass > 0, rescored / np.where(mass > 0, mass, 1.0), weights)


# ----------------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------------

def _images(dataset: Sequence[np.ndarray], name: str) -> List[np.ndarray]:
    images = [as_float_array(unwrap(x), 2, name) for x in dataset]
    if not images:
        raise DimensionError(f"{name} is empty")
    shape = images[0].shape
    if any(x.shape != shape for x in images):
        raise DimensionError(f"all images in {name} must share one shape")
    return images


def _banks(state: ModelState) -> Tuple[List[FilterBank], List[FilterBank], List[np.ndarray]]:
    return (
        [layer.filter_x for layer in state.layers],
        [layer.filter_y for layer in state.layers],
        [layer.associator.matrix for layer in state.layers],
    )


def total_loss(state: ModelState, batch_x: Sequence[np.ndarray], batch_y: Sequence[np.ndarray],
               config: Optional[ModelConfig] = None) -> LossComponents:
    """Every term of the joint objective on one batch pair.

    combined = recon_x + recon_y + mmd_weight*mmd + manifold_weight*manifold
               - lambda*(sparsity_x + sparsity_y); disabled modules contribute 0.
    """
    if not state.trained:
        raise UntrainedModelError("loss requires a trained state")
    config = config or state.config
    images_x = _images(batch_x, "batch_x")
    images_y = _images(batch_y, "batch_y")
    coders = build_coders(state.config, images_x[0].shape)
    banks_x, banks_y, associators = _banks(state)

    enc_x = forward(images_x, coders, banks_x, config)
    enc_y = forward(images_y, coders, banks_y, config)

    sparsity_x = sum(l4_norm4(z) for layer in enc_x.codes for z in layer)
    sparsity_y = sum(l4_norm4(z) for layer in enc_y.codes for z in layer)

    def recon(images, enc, banks) -> float:
        total = 0.0
        for i, x in enumerate(images):
            scalars = [layer[i] for layer in enc.scalars]
            r = x - decode_stack(enc.top[i], coders, banks, scalars)
            total += 0.5 * float(np.sum(r * r))
        return total

    recon_x = recon(images_x, enc_x, banks_x)
    recon_y = recon(images_y, enc_y, banks_y)

    mmd_value = multilayer_mmd(enc_x.codes, enc_y.codes, config.kernel).value if config.use_mmd else 0.0
    manifold_value = 0.0
    if config.use_manifold:
        weights = correspondence_weights(enc_x.codes, enc_y.codes, associators, config)
        manifold_value = manifold_loss(enc_x.codes, enc_y.codes, associators, config.manifold, weights)

    combined = (
        recon_x + recon_y
        + config.mmd_weight * mmd_value
        + config.manifold_weight * manifold_value
        - config.lmbda * (sparsity_x + sparsity_y)
    )
    return LossComponents(
        sparsity_x=sparsity_x,
        sparsity_y=sparsity_y,
        recon_x=recon_x,
        recon_y=recon_y,
        mmd=mmd_value,
        manifold=manifold_value,
        combined=combined,
    )


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

def _layer_seed(seed: int, layer: int, modality: int) -> int:
    return int(np.random.SeedSequence([seed, layer, modality]).generate_state(1)[0])


def pair_batches(n_x: int, n_y: int, batch_size: int, rng: np.random.Generator,
                 paired: bool = False) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Reshuffled index batches, one source batch matched with one target batch."""
    perm_x = rng.permutation(n_x)
    if paired:
        if n_x != n_y:
            raise DimensionError(f"paired batches need equal dataset sizes ({n_x} vs {n_y})")
        perm_y = perm_x.copy()
    else:
        perm_y = rng.permutation(n_y)
    count = max(math.ceil(n_x / batch_size), math.ceil(n_y / batch_size))
    count = max(1, min(count, n_x, n_y))
    return list(zip(np.array_split(perm_x, count), np.array_split(perm_y, count)))


def _normalize_by_batch(raw: Sequence[np.ndarray], groups: Sequence[np.ndarray],
                        config: ModelConfig) -> Tuple[List[np.ndarray], List[float]]:
    codes: List[Optional[np.ndarray]] = [None] * len(raw)
    scalars = [1.0] * len(raw)
    for group in groups:
        normalized, group_scalars = normalize_codes([raw[i] for i in group], config)
        for i, z, s in zip(group, normalized, group_scalars):
            codes[i] = z
            scalars[i] = s
    return codes, scalars  # type: ignore[return-value]


def _mean_norm(raw: Sequence[np.ndarray]) -> float:
    return float(np.mean([np.linalg.norm(np.ravel(z)) for z in raw]))


def _train_layer(index: int, coder: BaseCoder, previous: Optional[LayerState],
                 inputs_x: List[np.ndarray], inputs_y: List[np.ndarray],
                 lower_x: List[List[np.ndarray]], lower_y: List[List[np.ndarray]],
                 lower_associators: List[np.ndarray],
                 batches: List[Tuple[np.ndarray, np.ndarray]],
                 config: ModelConfig) -> Tuple[LayerState, List[np.ndarray], List[np.ndarray]]:
    if previous is None or coder.refits_each_epoch:
        bank_x = coder.fit(inputs_x, previous.filter_x if previous else None, _layer_seed(config.seed, index, 0))
        if previous is not None:
            init_y: Optional[FilterBank] = previous.filter_y
        else:
            init_y = bank_x if config.warm_start_target else None
        bank_y = coder.fit(inputs_y, init_y, _layer_seed(config.seed, index, 1))
    else:
        bank_x, bank_y = previous.filter_x, previous.filter_y

    raw_x = coder.encode_batch(inputs_x, bank_x)
    raw_y = coder.encode_batch(inputs_y, bank_y)
    codes_x, _ = _normalize_by_batch(raw_x, [bx for bx, _ in batches], config)
    codes_y, _ = _normalize_by_batch(raw_y, [by for _, by in batches], config)

    k = coder.output_shape[0]
    p_previous = previous.associator.matrix if previous is not None else np.eye(k)
    stack_x = lower_x + [codes_x]
    stack_y = lower_y + [codes_y]

    def batch_stacks(bx, by):
        return [[layer[i] for i in bx] for layer in stack_x], [[layer[j] for j in by] for layer in stack_y]

    weights_per_batch = []
    equations: Optional[NormalEquations] = None
    for bx, by in batches:
        sx, sy = batch_stacks(bx, by)
        w = correspondence_weights(sx, sy, lower_associators + [p_previous], config)
        weights_per_batch.append(w)
        eq = normal_equations(sx[-1], sy[-1], w)
        if equations is None:
            equations = eq
        else:
            equations += eq
    associator = solve_associator(equations, config.associator_ridge)  # type: ignore[arg-type]

    eta = min(max(config.manifold_step * config.manifold_weight, 0.0), 1.0)
    if config.use_manifold and config.correspondence == Correspondence.SOFT_KERNEL and eta > 0:
        corrected: Optional[NormalEquations] = None
        for (bx, by), w in zip(batches, weights_per_batch):
            sx, sy = batch_stacks(bx, by)
            w_m = manifold_reweighted(sx, sy, lower_associators + [associator.matrix], w, config)
            eq = normal_equations(sx[-1], sy[-1], w_m)
            if corrected is None:
                corrected = eq
            else:
                corrected += eq
        p_m = solve_associator(corrected, config.associator_ridge)  # type: ignore[arg-type]
        p = associator.matrix + eta * (p_m.matrix - associator.matrix)
        associator = Associator(p, ridge=config.associator_ridge,
                                condition=associator.condition, residual=associator.residual)

    layer = LayerState(
        spec=coder.spec,
        input_shape=coder.input_shape,  # type: ignore[arg-type]
        filter_x=bank_x,
        filter_y=bank_y,
        associator=associator,
        scale_x=_mean_norm(raw_x),
        scale_y=_mean_norm(raw_y),
    )
    return layer, codes_x, codes_y


def _epoch_losses(state: ModelState, images_x: List[np.ndarray], images_y: List[np.ndarray],
                  batches: List[Tuple[np.ndarray, np.ndarray]], config: ModelConfig) -> LossComponents:
    return LossComponents.mean([
        total_loss(state, [images_x[i] for i in bx], [images_y[j] for j in by], config)
        for bx, by in batches
    ])


def _blend_associators(candidate: Sequence[LayerState], previous: Sequence[LayerState],
                       step: float) -> Tuple[LayerState, ...]:
    blended = []
    for new, old in zip(candidate, previous):
        p_old = old.associator.matrix
        p = p_old + step * (new.associator.matrix - p_old)
        associator = Associator(p, ridge=new.associator.ridge, condition=new.associator.condition,
                                residual=new.associator.residual)
        blended.append(replace(new, associator=associator))
    return tuple(blended)


def _accept_update(epoch: int, state: ModelState, candidate: Tuple[LayerState, ...],
                   images_x: List[np.ndarray], images_y: List[np.ndarray],
                   eval_batches: List[Tuple[np.ndarray, np.ndarray]],
                   config: ModelConfig) -> Tuple[Tuple[LayerState, ...], LossComponents]:
    """Pick the epoch's layers so the combined loss never rises.

    The full update is tried first, then associators pulled back toward the
    previous epoch's; if none of them improves, the previous layers stay.
    """
    losses = _epoch_losses(ModelState(config=config, layers=candidate), images_x, images_y, eval_batches, config)
    if not state.training_log:
        return candidate, losses
    previous = state.training_log[-1].losses
    if losses.combined <= previous.combined:
        return candidate, losses
    for step in BACKTRACK_STEPS:
        layers = _blend_associators(candidate, state.layers, step)
        trial = _epoch_losses(ModelState(config=config, layers=layers), images_x, images_y, eval_batches, config)
        if trial.combined <= previous.combined:
            logger.debug("associator_step_reduced", epoch=epoch, step=step, combined=trial.combined)
            return layers, trial
    logger.info("epoch_update_rejected", epoch=epoch, candidate=losses.combined, kept=previous.combined)
    return state.layers, previous


def _run_epoch(epoch: int, state: ModelState, coders: List[BaseCoder], images_x: List[np.ndarray],
               images_y: List[np.ndarray], config: ModelConfig, rng: np.random.Generator,
               eval_batches: List[Tuple[np.ndarray, np.ndarray]]) -> ModelState:
    paired = config.correspondence == Correspondence.FIXED_PAIRS
    batches = pair_batches(len(images_x), len(images_y), config.batch_size, rng, paired=paired)
    inputs_x = [x[np.newaxis] for x in images_x]
    inputs_y = [y[np.newaxis] for y in images_y]
    lower_x: List[List[np.ndarray]] = []
    lower_y: List[List[np.ndarray]] = []
    lower_associators: List[np.ndarray] = []
    layers: List[LayerState] = []

    for index, coder in enumerate(coders):
        previous = state.layers[index] if state.trained else None
        try:
            layer, codes_x, codes_y = _train_layer(
                index, coder, previous, inputs_x, inputs_y,
                lower_x, lower_y, lower_associators, batches, config,
            )
        except Csc4NetError as e:
            raise TrainingError(str(e), epoch=epoch, layer=index) from e
        layers.append(layer)
        lower_x.append(codes_x)
        lower_y.append(codes_y)
        lower_associators.append(layer.associator.matrix)
        inputs_x, inputs_y = codes_x, codes_y

    try:
        kept, losses = _accept_update(epoch, state, tuple(layers), images_x, images_y, eval_batches, config)
    except Csc4NetError as e:
        raise TrainingError(str(e), epoch=epoch) from e

    record = EpochRecord(epoch=epoch, losses=losses)
    updated = ModelState(config=config, layers=kept, training_log=state.training_log + (record,))
    try:
        updated.check_invariants()
    except Csc4NetError as e:
        raise TrainingError(str(e), epoch=epoch) from e
    return updated


def train(dataset_x: Sequence[np.ndarray], dataset_y: Sequence[np.ndarray], config: ModelConfig,
          on_epoch: Optional[EpochCallback] = None) -> ModelState:
    """Learn source/target banks and associators from (unpaired) image sets.

    Losses are logged on one fixed set of batches so epochs are comparable;
    the combined loss in the training log is non-increasing.
    """
    images_x = _images(dataset_x, "dataset_x")
    images_y = _images(dataset_y, "dataset_y")
    if images_x[0].shape != images_y[0].shape:
        raise DimensionError(f"modalities differ in image shape ({images_x[0].shape} vs {images_y[0].shape})")

    coders = build_coders(config, images_x[0].shape)
    rng = np.random.default_rng(config.seed)
    paired = config.correspondence == Correspondence.FIXED_PAIRS
    eval_batches = pair_batches(len(images_x), len(images_y), config.batch_size,
                                np.random.default_rng([config.seed, EVAL_STREAM]), paired=paired)
    state = ModelState(config=config)
    logger.info(
        "training_started",
        samples_x=len(images_x),
        samples_y=len(images_y),
        layers=len(coders),
        epochs=config.epochs,
        coder=config.coder.value,
    )
    for epoch in range(1, config.epochs + 1):
        state = _run_epoch(epoch, state, coders, images_x, images_y, config, rng, eval_batches)
        record = state.training_log[-1]
        logger.info("epoch_completed", epoch=epoch, **{k: v for k, v in zip(record.losses.names(), record.losses.values())})
        if on_epoch is not None:
            on_epoch(record)
    return state


# ----------------------------------------------------------------------------
# Synthesis
# ----------------------------------------------------------------------------

def synthesize(test_image: Union[np.ndarray, Image2], state: ModelState, config: Optional[ModelConfig] = None,
               direction: str = "forward") -> np.ndarray:
    """Map an image of the source modality to the target modality.

    ``direction="reverse"`` maps target to source through the
    pseudo-inverse of the top associator.
    """
    if not state.trained:
        raise UntrainedModelError("synthesis requires a trained model state")
    if direction not in ("forward", "reverse"):
        raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")
    config = config or state.config
    image = as_float_array(unwrap(test_image), 2, "test_image")
    if image.shape != state.image_shape:
        raise DimensionError(f"test image {image.shape} does not match trained shape {state.image_shape}")

    coders = build_coders(state.config, image.shape)
    banks_x, banks_y, _ = _banks(state)
    top = state.layers[-1].associator.matrix
    if direction == "forward":
        source_banks, target_banks, p = banks_x, banks_y, top
        ratios = [layer.scale_x / layer.scale_y for layer in state.layers]
    else:
        source_banks, target_banks, p = banks_y, banks_x, np.linalg.pinv(top)
        ratios = [layer.scale_y / layer.scale_x for layer in state.layers]

    u = image[np.newaxis]
    source_scalars: List[float] = []
    for coder, bank in zip(coders, source_banks):
        raw = coder.encode(u, bank)
        s = iun_scalars([raw], config.iun)[0] if config.use_iun else 1.0
        source_scalars.append(s)
        u = s * raw

    v = apply_associator(p, u)
    target_scalars = [s * r if config.use_iun else 1.0 for s, r in zip(source_scalars, ratios)]
    out = decode_stack(v, coders, target_banks, target_scalars)
    return np.clip(out, 0.0, 1.0)
