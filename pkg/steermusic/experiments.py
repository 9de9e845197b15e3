"""Experiment runners behind the CLI commands.

Each ``run_*`` function takes a validated ExperimentConfig and an
ArtifactWriter, does the work and writes its artifacts. Sweeps fan out over
a thread pool; rows are sorted by their grid key before anything is
written, so reports do not depend on scheduling.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.stats import spearmanr

from steermusic.audio_io import read_wav, write_wav
from steermusic.classifier import AttributeClassifier, attribute_fidelity, train_classifier
from steermusic.config import EditSection, ExperimentConfig
from steermusic.denoiser import AnalyticDenoiser, Denoiser, ToyDenoiser
from steermusic.diffusion import NoiseSchedule, ddim_invert, ddim_sample, make_schedule
from steermusic.distill import DistillConfig, DistillMethod, edit
from steermusic.errors import (ConfigError, InvalidArgumentError, InvalidStateError,
                               UndefinedCorrelationError, UndefinedSimilarityError)
from steermusic.metrics import (METRIC_PROVENANCE, CqtConfig, align_lengths, cqt1_pcc,
                                feature_perceptual_distance, frechet_feature_distance, mfcc,
                                mfcc_cos)
from steermusic.network import DenoiserParams, load_checkpoint, save_checkpoint
from steermusic.prompts import CONCEPT_SLOT, PromptCondition, PromptVocabulary
from steermusic.reports import ArtifactWriter
from steermusic.spectrogram import Spectrogram, load_spectrogram, save_spectrogram
from steermusic.synth import (ClipSpec, gen_clip, gen_dataset, gen_reference_set, instruments_of,
                              load_manifest, resynthesize)
from steermusic.training import (ReferenceSet, TrainingConfig, evaluate_dpm_loss, personalize,
                                 textual_inversion, train)

logger = logging.getLogger(__name__)

RESYNTH_SEED = 0

LAMBDA_COLUMNS = ['lambda', 'pcon', 'seed', 'cqt1_pcc', 'mfcc_cos']
CFG_COLUMNS = ['omega', 'grad_scale', 'seed', 'clap_analog', 'lpaps_analog']
INVERSION_COLUMNS = ['seed', 'clip', 'conditioning', 'cqt1_pcc', 'rms']
BENCHMARK_COLUMNS = ['method', 'seed', 'clip', 'cqt1_pcc', 'clap_analog', 'lpaps_analog']
FINETUNE_COLUMNS = ['finetune_steps', 'seed', 'cqt1_pcc', 'mfcc_cos']
EVAL_COLUMNS = ['source', 'edited', 'reference', 'cqt1_pcc', 'mfcc_cos', 'truncated', 'error']


@dataclass
class RunContext:
    config: ExperimentConfig
    writer: ArtifactWriter
    workers: int = 1
    progress: bool = False

    @property
    def root(self) -> Path:
        return self.writer.root

    def parallel_map(self, fn: Callable[[Any], Any], jobs: Sequence[Any]) -> List[Any]:
        if self.workers <= 1 or len(jobs) <= 1:
            return [fn(job) for job in jobs]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def build_schedule(config: ExperimentConfig) -> NoiseSchedule:
    return make_schedule(config.train.schedule_steps, config.train.schedule_kind)


def _load_model(config: ExperimentConfig, value: str, default: str) -> DenoiserParams:
    path = config.resolve_path(value, default)
    logger.info(f'Loading checkpoint {path}')
    return load_checkpoint(path)


def load_models(config: ExperimentConfig, need_pdm: bool) -> Tuple[DenoiserParams, Optional[DenoiserParams]]:
    dpm = _load_model(config, config.edit.checkpoint, 'model.json')
    pdm = None
    if need_pdm or config.edit.pdm_checkpoint:
        pdm = _load_model(config, config.edit.pdm_checkpoint, 'pdm.json')
        # the shift term evaluates the base model on the concept prompt too
        for name in pdm.vocabulary.slots[CONCEPT_SLOT]:
            token_id = dpm.register_concept(name)
            if token_id != pdm.vocabulary.token_id(CONCEPT_SLOT, name):
                raise InvalidStateError(f'concept {name} has different ids in the two checkpoints')
    return dpm, pdm


def source_clip(section: EditSection, vocab: PromptVocabulary,
                melody_offset: int = 0) -> Tuple[Spectrogram, PromptCondition]:
    """The clip to edit: a file from ``edit.source_path`` or a synthetic clip from ``edit.source``."""
    fields = dict(section.source)
    if section.source_path:
        prompt_fields = {k: v for k, v in fields.items() if k in vocab.slots}
        return load_spectrogram(section.source_path), vocab.condition(**prompt_fields)
    fields['melody_seed'] = int(fields.get('melody_seed', 0)) + melody_offset
    try:
        spec = ClipSpec(**fields)
    except TypeError as e:
        raise ConfigError(f'edit.source: {e}')
    return gen_clip(spec, vocab)


def target_prompt(section: EditSection, vocab: PromptVocabulary) -> PromptCondition:
    return vocab.condition(**section.target)


def concept_target_prompt(config: ExperimentConfig, y_src: PromptCondition,
                          vocab: PromptVocabulary) -> PromptCondition:
    """Target of the personalized sweeps: the source prompt plus the concept token.

    Slots named in a non-default ``edit.target`` replace the source ones; the
    concept slot is ``personalize.token`` unless the target names one.
    """
    by_slot = {vocab.slot_of(token_id): token_id for token_id in y_src.tokens}
    if config.edit.target != EditSection().target:
        for slot, name in config.edit.target.items():
            if name:
                by_slot[slot] = vocab.token_id(slot, name)
            else:
                by_slot.pop(slot, None)
    if CONCEPT_SLOT not in config.edit.target:
        by_slot[CONCEPT_SLOT] = vocab.token_id(CONCEPT_SLOT, config.personalize.token)
    return vocab.condition_from_ids(by_slot.values())


def distill_config(config: ExperimentConfig, method: Optional[str] = None,
                   seed: Optional[int] = None, **overrides: Any) -> DistillConfig:
    """DistillConfig from the [edit] section; None values fall back to the method defaults."""
    section = config.edit
    values = dict(steps=section.steps, lr=section.lr, grad_scale=section.grad_scale,
                  omega=section.omega, lam=section.lam, tau=section.tau, gamma=section.gamma,
                  t_min_frac=section.t_min_frac, t_max_frac=section.t_max_frac,
                  w_kind=section.w_kind, t_edit_frac=section.t_edit_frac,
                  snapshot_every=section.snapshot_every,
                  baseline_on_pdm=section.baseline_on_pdm)
    values.update(overrides)
    if seed is None:
        seed = section.seed if section.seed is not None else config.seed
    return DistillConfig.for_method(method or section.method, seed=seed, **values)


def wrap(params: Optional[DenoiserParams]) -> Optional[Denoiser]:
    return ToyDenoiser(params) if params is not None else None


def _measure(fn: Callable[..., float], *args: Any) -> Tuple[Optional[float], Optional[str]]:
    """Metric value, or (None, error kind) when the metric is undefined for the input."""
    try:
        return fn(*args), None
    except (UndefinedCorrelationError, UndefinedSimilarityError) as e:
        return None, e.kind


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _spearman(x: Sequence[float], y: Sequence[Optional[float]]) -> Optional[float]:
    pairs = [(a, b) for a, b in zip(x, y) if b is not None]
    if len(pairs) < 2 or len({a for a, _ in pairs}) < 2 or len({b for _, b in pairs}) < 2:
        return None
    rho = spearmanr([a for a, _ in pairs], [b for _, b in pairs]).statistic
    return None if np.isnan(rho) else float(rho)


def reference_waveforms(refs: ReferenceSet) -> List[np.ndarray]:
    return [resynthesize(spec, seed=RESYNTH_SEED) for spec, _ in refs.items]


def concept_proximity(wav: np.ndarray, ref_wavs: Sequence[np.ndarray]) -> Optional[float]:
    """Mean MFCC-COS of ``wav`` to each reference clip."""
    return _mean(_measure(mfcc_cos, wav, ref)[0] for ref in ref_wavs)


def reference_set_for(config: ExperimentConfig, vocab: PromptVocabulary) -> ReferenceSet:
    section = config.personalize
    return gen_reference_set(section.concept_profile, section.n_refs, vocab, section.seed,
                             section.token)


def classifier_clips(vocab: PromptVocabulary, per_combination: int,
                     seed: int) -> List[Tuple[Spectrogram, PromptCondition]]:
    """Every instrument x genre combination over a few melodies."""
    items = []
    for i, instrument in enumerate(instruments_of(vocab)):
        for j, genre in enumerate(vocab.slots.get('genre', [])):
            for m in range(per_combination):
                spec = ClipSpec(melody_seed=seed * 10_007 + 97 * i + 13 * j + m,
                                instrument=instrument, genre=genre)
                items.append(gen_clip(spec, vocab))
    return items


def fit_classifier(config: ExperimentConfig, vocab: PromptVocabulary) -> AttributeClassifier:
    run = train_classifier(classifier_clips(vocab, 4, config.seed), vocab,
                           steps=config.ablation.classifier_steps, seed=config.seed)
    return run.classifier


def _target_attribute(prompt: PromptCondition, vocab: PromptVocabulary) -> str:
    for token_id in prompt.token_ids():
        if vocab.slot_of(token_id) == 'instrument':
            return f'instrument:{vocab.name_of(token_id)}'
    raise InvalidArgumentError('the target prompt names no instrument to score fidelity against')


# ---------------------------------------------------------------------------
# gen / train / personalize
# ---------------------------------------------------------------------------

def run_gen(ctx: RunContext) -> Dict[str, Any]:
    section = ctx.config.dataset
    manifest = gen_dataset(section.n_clips, PromptVocabulary(), section.seed, ctx.root,
                           section.texture_prob)
    for item in manifest.items:
        ctx.writer.adopt(ctx.root / item.path)
    ctx.writer.adopt(ctx.root / 'manifest.json')
    return {'n_clips': len(manifest), 'manifest': 'manifest.json'}


def run_train(ctx: RunContext) -> Dict[str, Any]:
    config = ctx.config
    section = config.train
    manifest = load_manifest(config.resolve_path(section.manifest, 'manifest.json'))
    items = manifest.training_items()
    if not items:
        raise InvalidArgumentError('the dataset manifest has no clips to train on')
    sched = build_schedule(config)
    initial = DenoiserParams.initialize(manifest.vocabulary, seed=section.seed)
    training = TrainingConfig(section.steps, section.lr, section.batch, section.seed,
                              section.cond_drop)
    result = train(items, training, sched, initial, progress=ctx.progress)

    save_checkpoint(result.params, ctx.writer.path('model.json'))
    ctx.writer.adopt(ctx.writer.path('model.json'))
    ctx.writer.csv('losses.csv', ['step', 'loss'],
                   ({'step': i + 1, 'loss': loss} for i, loss in enumerate(result.losses)))
    report = {
        'steps': section.steps,
        'initial_loss': evaluate_dpm_loss(initial, items[:64], sched),
        'final_loss': evaluate_dpm_loss(result.params, items[:64], sched),
    }
    ctx.writer.json('train.json', report)
    return report


def run_personalize(ctx: RunContext) -> Dict[str, Any]:
    config = ctx.config
    section = config.personalize
    sched = build_schedule(config)
    base = _load_model(config, section.checkpoint, 'model.json')
    base.register_concept(section.token)
    refs = reference_set_for(config, base.vocabulary)

    if section.mode == 'finetune':
        pdm = personalize(base, refs, sched, section.steps, section.lr, section.seed,
                          progress=ctx.progress)
    else:
        vector = textual_inversion(base, refs, sched, section.steps, seed=section.seed,
                                   progress=ctx.progress)
        pdm = base.copy()
        with_embedding(pdm, refs.concept_id, vector)

    save_checkpoint(pdm, ctx.writer.path('pdm.json'))
    ctx.writer.adopt(ctx.writer.path('pdm.json'))
    for i, (spec, _) in enumerate(refs.items):
        save_spectrogram(spec, ctx.writer.path(f'refs/ref_{i:02d}.spec'))
        ctx.writer.adopt(ctx.writer.path(f'refs/ref_{i:02d}.spec'))
        write_wav(resynthesize(spec, seed=RESYNTH_SEED), ctx.writer.path(f'refs/ref_{i:02d}.wav'))
        ctx.writer.adopt(ctx.writer.path(f'refs/ref_{i:02d}.wav'))

    items = refs.training_items()
    report = {
        'mode': section.mode,
        'concept': section.token,
        'concept_id': refs.concept_id,
        'n_refs': len(refs),
        'ref_loss_base': evaluate_dpm_loss(base, items, sched),
        'ref_loss_personalized': evaluate_dpm_loss(pdm, items, sched),
    }
    ctx.writer.json('personalize.json', report)
    return report


def with_embedding(params: DenoiserParams, token_id: int, vector: torch.Tensor) -> None:
    """Write a learned concept embedding into the table of ``params``."""
    with torch.no_grad():
        params.network.token_embedding.weight[token_id] = vector


# ---------------------------------------------------------------------------
# edit / eval
# ---------------------------------------------------------------------------

def run_edit(ctx: RunContext) -> Dict[str, Any]:
    config = ctx.config
    distill = distill_config(config)
    dpm, pdm = load_models(config, distill.method.personalized)
    vocab = (pdm or dpm).vocabulary
    x_src, y_src = source_clip(config.edit, vocab)
    y_tgt = target_prompt(config.edit, vocab)
    sched = build_schedule(config)

    result = edit(x_src, y_src, y_tgt, ToyDenoiser(dpm), distill, sched, pdm=wrap(pdm),
                  progress=ctx.progress)
    writer = ctx.writer
    save_spectrogram(x_src, writer.path('source.spec'))
    writer.adopt(writer.path('source.spec'))
    save_spectrogram(result.x_edited, writer.path('edited.spec'))
    writer.adopt(writer.path('edited.spec'))
    for step, snapshot in result.trajectory:
        path = writer.path(f'snapshots/step_{step:05d}.spec')
        save_spectrogram(x_src.with_data(snapshot), path)
        writer.adopt(path)

    wav_src = resynthesize(x_src, seed=RESYNTH_SEED)
    wav_edit = resynthesize(result.x_edited, seed=RESYNTH_SEED)
    writer.adopt(write_wav(wav_src, writer.path('source.wav')))
    writer.adopt(write_wav(wav_edit, writer.path('edited.wav')))

    pcc, pcc_error = _measure(cqt1_pcc, wav_src, wav_edit)
    cos, cos_error = _measure(mfcc_cos, wav_edit, wav_src)
    row = {
        'method': distill.method.value,
        'seed': distill.seed,
        'cqt1_pcc': pcc,
        'mfcc_cos': cos,
        'lpaps_analog': feature_perceptual_distance(x_src, result.x_edited, ToyDenoiser(dpm)),
        'error': pcc_error or cos_error,
    }
    writer.csv('metrics.csv', list(row), [row])
    writer.json('edit.json', {**result.to_report(), 'source_prompt': vocab.describe(y_src),
                              'target_prompt': vocab.describe(y_tgt),
                              'provenance': METRIC_PROVENANCE})
    return row


def run_eval(ctx: RunContext) -> Dict[str, Any]:
    section = ctx.config.evaluate
    pairs = [list(p) for p in section.pairs]
    if section.source_wav or section.edited_wav:
        pairs.append([section.source_wav, section.edited_wav, section.reference_wav])
    if not pairs:
        raise InvalidArgumentError('nothing to evaluate: set evaluate.source_wav/edited_wav or pairs')

    rows = []
    cqt_config = CqtConfig()
    for pair in pairs:
        if len(pair) not in (2, 3) or not pair[0] or not pair[1]:
            raise ConfigError(f'evaluate pair must be [source, edited(, reference)], got {pair}')
        source, edited = pair[0], pair[1]
        reference = pair[2] if len(pair) == 3 and pair[2] else ''
        wav_src, wav_edit, truncated = align_lengths(read_wav(source), read_wav(edited))
        if truncated:
            logger.warning(f'{source} and {edited} differ in length; truncated to {len(wav_src)} samples')
        pcc, pcc_error = _measure(cqt1_pcc, wav_src, wav_edit, cqt_config, section.contour_mode)
        ref_wav = read_wav(reference) if reference else wav_src
        cos, cos_error = _measure(mfcc_cos, wav_edit, ref_wav)
        rows.append({'source': source, 'edited': edited, 'reference': reference,
                     'cqt1_pcc': pcc, 'mfcc_cos': cos, 'truncated': truncated,
                     'error': pcc_error or cos_error})

    ctx.writer.csv('metrics.csv', EVAL_COLUMNS, rows)
    summary = {
        'pairs': len(rows),
        'contour_mode': section.contour_mode,
        'mean_cqt1_pcc': _mean(r['cqt1_pcc'] for r in rows),
        'mean_mfcc_cos': _mean(r['mfcc_cos'] for r in rows),
        'undefined': sum(1 for r in rows if r['error']),
        'provenance': {k: METRIC_PROVENANCE[k] for k in ('cqt1_pcc', 'mfcc_cos')},
    }
    ctx.writer.json('summary.json', summary)
    return summary


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def run_ablate_lambda(ctx: RunContext) -> Dict[str, Any]:
    """SteerMusic+ across the lambda grid, with and without PCon."""
    config = ctx.config
    section = config.ablation
    if not section.lambdas or not section.pcon:
        raise InvalidArgumentError('ablate-lambda needs a nonempty lambda grid and pcon list')
    dpm, pdm = load_models(config, need_pdm=True)
    sched = build_schedule(config)
    vocab = pdm.vocabulary
    ref_wavs = reference_waveforms(reference_set_for(config, vocab))
    dpm_model, pdm_model = ToyDenoiser(dpm), ToyDenoiser(pdm)

    def job(key):
        lam, pcon, seed = key
        x_src, y_src = source_clip(config.edit, vocab, melody_offset=seed)
        y_tgt = concept_target_prompt(config, y_src, vocab)
        distill = distill_config(config, DistillMethod.STEERMUSIC_PLUS, seed=seed, lam=lam,
                                 gamma=config.edit.gamma if pcon else 0.0)
        result = edit(x_src, y_src, y_tgt, dpm_model, distill, sched, pdm=pdm_model)
        wav_src = resynthesize(x_src, seed=RESYNTH_SEED)
        wav_edit = resynthesize(result.x_edited, seed=RESYNTH_SEED)
        return {'lambda': lam, 'pcon': pcon, 'seed': seed,
                'cqt1_pcc': _measure(cqt1_pcc, wav_src, wav_edit)[0],
                'mfcc_cos': concept_proximity(wav_edit, ref_wavs)}

    keys = sorted((float(lam), bool(pcon), int(seed)) for lam in section.lambdas
                  for pcon in section.pcon for seed in section.seeds)
    rows = ctx.parallel_map(job, keys)
    ctx.writer.csv('ablate_lambda.csv', LAMBDA_COLUMNS, rows)

    summary: Dict[str, Any] = {'grid': {'lambdas': sorted(set(section.lambdas)),
                                        'pcon': sorted(set(section.pcon))}}
    for pcon in sorted(set(bool(p) for p in section.pcon)):
        subset = [r for r in rows if r['pcon'] == pcon]
        per_seed = {}
        for seed in sorted(set(section.seeds)):
            seed_rows = [r for r in subset if r['seed'] == seed]
            per_seed[str(seed)] = _spearman([r['lambda'] for r in seed_rows],
                                            [r['mfcc_cos'] for r in seed_rows])
        by_lambda = {repr(lam): {'cqt1_pcc': _mean(r['cqt1_pcc'] for r in subset if r['lambda'] == lam),
                                 'mfcc_cos': _mean(r['mfcc_cos'] for r in subset if r['lambda'] == lam)}
                     for lam in sorted({r['lambda'] for r in subset})}
        summary['pcon' if pcon else 'no_pcon'] = {'spearman_lambda_mfcc_cos': per_seed,
                                                  'by_lambda': by_lambda}
    ctx.writer.json('summary.json', summary)
    return summary


def run_ablate_cfg(ctx: RunContext) -> Dict[str, Any]:
    """Guidance scale x w(t) scale sweep: fidelity against perceptual distance."""
    config = ctx.config
    section = config.ablation
    if not section.omegas or not section.grad_scales:
        raise InvalidArgumentError('ablate-cfg needs nonempty omega and grad_scale grids')
    method = DistillMethod(config.edit.method)
    dpm, pdm = load_models(config, method.personalized)
    sched = build_schedule(config)
    vocab = (pdm or dpm).vocabulary
    y_tgt = target_prompt(config.edit, vocab)
    classifier = fit_classifier(config, vocab)
    attribute = _target_attribute(y_tgt, vocab)
    dpm_model, pdm_model = ToyDenoiser(dpm), wrap(pdm)

    def job(key):
        omega, grad_scale, seed = key
        x_src, y_src = source_clip(config.edit, vocab, melody_offset=seed)
        distill = distill_config(config, method, seed=seed, omega=omega, grad_scale=grad_scale)
        result = edit(x_src, y_src, y_tgt, dpm_model, distill, sched, pdm=pdm_model)
        return {'omega': omega, 'grad_scale': grad_scale, 'seed': seed,
                'clap_analog': attribute_fidelity(result.x_edited, attribute, classifier),
                'lpaps_analog': feature_perceptual_distance(x_src, result.x_edited, dpm_model)}

    keys = sorted((float(o), float(g), int(s)) for o in section.omegas
                  for g in section.grad_scales for s in section.seeds)
    rows = ctx.parallel_map(job, keys)
    ctx.writer.csv('ablate_cfg.csv', CFG_COLUMNS, rows)
    summary = {
        'method': method.value,
        'target_attribute': attribute,
        'spearman_omega_fidelity': {
            str(seed): _spearman([r['omega'] for r in rows if r['seed'] == seed],
                                 [r['clap_analog'] for r in rows if r['seed'] == seed])
            for seed in sorted(set(section.seeds))},
        'provenance': {k: METRIC_PROVENANCE[k] for k in ('clap_analog', 'lpaps_analog')},
    }
    ctx.writer.json('summary.json', summary)
    return summary


def _wrong_instrument(spec: ClipSpec, vocab: PromptVocabulary) -> str:
    names = list(instruments_of(vocab))
    return names[(names.index(spec.instrument) + 1) % len(names)]


def run_demo_inversion(ctx: RunContext) -> Dict[str, Any]:
    """Matched vs mismatched 20-step DDIM invert/reconstruct on a batch of clips.

    With a trained checkpoint the toy model is used; without one, a
    closed-form oracle whose mismatched prompt describes a different clip.
    """
    config = ctx.config
    section = config.ablation
    if section.batch < 1:
        raise InvalidArgumentError('demo-inversion needs a batch of at least one clip')
    sched = build_schedule(config)
    checkpoint = config.resolve_path(config.edit.checkpoint, 'model.json')
    params = load_checkpoint(checkpoint) if checkpoint.is_file() else None
    vocab = params.vocabulary if params is not None else PromptVocabulary()
    instruments = instruments_of(vocab)
    genres = vocab.slots['genre']
    steps = section.inversion_steps

    def job(key):
        seed, index = key
        rng = np.random.default_rng([seed, index])
        spec = ClipSpec(melody_seed=int(rng.integers(2 ** 31)),
                        instrument=instruments[int(rng.integers(len(instruments)))],
                        genre=genres[int(rng.integers(len(genres)))])
        x0, y_src = gen_clip(spec, vocab)
        wrong = ClipSpec(melody_seed=spec.melody_seed + 1, instrument=_wrong_instrument(spec, vocab),
                         genre=spec.genre)
        x_wrong, y_wrong = gen_clip(wrong, vocab)
        if params is not None:
            model: Denoiser = ToyDenoiser(params)
        else:
            model = AnalyticDenoiser(sched, {y_src: x0.data, y_wrong: x_wrong.data})
        wav_src = resynthesize(x0, seed=RESYNTH_SEED)
        rows = []
        for name, cond in (('matched', y_src), ('mismatched', y_wrong)):
            latent = ddim_invert(x0.data, cond, model, steps, 1.0, sched)
            recon = ddim_sample(latent, cond, model, steps, 1.0, sched)
            wav = resynthesize(x0.with_data(recon), seed=RESYNTH_SEED)
            rows.append({'seed': seed, 'clip': index, 'conditioning': name,
                         'cqt1_pcc': _measure(cqt1_pcc, wav_src, wav)[0],
                         'rms': float(np.sqrt(np.mean((recon - x0.data).numpy() ** 2)))})
        return rows

    keys = [(int(seed), i) for seed in sorted(set(section.seeds)) for i in range(section.batch)]
    rows = [row for rows in ctx.parallel_map(job, keys) for row in rows]
    ctx.writer.csv('inversion.csv', INVERSION_COLUMNS, rows)

    per_seed = {}
    for seed in sorted(set(section.seeds)):
        matched = [r['cqt1_pcc'] for r in rows if r['seed'] == seed and r['conditioning'] == 'matched']
        mismatched = [r['cqt1_pcc'] for r in rows if r['seed'] == seed and r['conditioning'] == 'mismatched']
        m, mm = _mean(matched), _mean(mismatched)
        per_seed[str(seed)] = {'matched': matched, 'mismatched': mismatched,
                               'matched_mean': m, 'mismatched_mean': mm,
                               'gap': None if m is None or mm is None else m - mm}
    summary = {'model': 'toy' if params is not None else 'analytic', 'inversion_steps': steps,
               'batch': section.batch, 'per_seed': per_seed}
    ctx.writer.json('summary.json', summary)
    return summary


def run_benchmark(ctx: RunContext) -> Dict[str, Any]:
    """Instrument-change benchmark across editing methods."""
    config = ctx.config
    section = config.ablation
    methods = [DistillMethod(m) for m in section.methods]
    if not methods:
        raise InvalidArgumentError('benchmark needs at least one method')
    dpm, pdm = load_models(config, any(m.personalized for m in methods))
    sched = build_schedule(config)
    vocab = dpm.vocabulary
    instruments = instruments_of(vocab)
    classifier = fit_classifier(config, vocab)
    dpm_model, pdm_model = ToyDenoiser(dpm), wrap(pdm)

    def pair(seed, index):
        rng = np.random.default_rng([seed, index, 0x62656e])
        src = instruments[int(rng.integers(len(instruments)))]
        tgt = [n for n in instruments if n != src][int(rng.integers(len(instruments) - 1))]
        genre = vocab.slots['genre'][int(rng.integers(len(vocab.slots['genre'])))]
        spec = ClipSpec(melody_seed=int(rng.integers(2 ** 31)), instrument=src, genre=genre)
        x_src, y_src = gen_clip(spec, vocab)
        return x_src, y_src, vocab.condition(instrument=tgt, genre=genre), f'instrument:{tgt}'

    def job(key):
        method, seed, index = key
        x_src, y_src, y_tgt, attribute = pair(seed, index)
        distill = distill_config(config, method, seed=seed * 1000 + index)
        result = edit(x_src, y_src, y_tgt, dpm_model, distill, sched, pdm=pdm_model)
        wav_src = resynthesize(x_src, seed=RESYNTH_SEED)
        wav_edit = resynthesize(result.x_edited, seed=RESYNTH_SEED)
        row = {'method': method, 'seed': seed, 'clip': index,
               'cqt1_pcc': _measure(cqt1_pcc, wav_src, wav_edit)[0],
               'clap_analog': attribute_fidelity(result.x_edited, attribute, classifier),
               'lpaps_analog': feature_perceptual_distance(x_src, result.x_edited, dpm_model)}
        return row, mfcc(wav_src), mfcc(wav_edit)

    keys = sorted((m.value, int(s), i) for m in methods for s in section.seeds
                  for i in range(section.n_clips))
    results = ctx.parallel_map(job, keys)
    rows = [r for r, _, _ in results]
    ctx.writer.csv('benchmark.csv', BENCHMARK_COLUMNS, rows)

    summary: Dict[str, Any] = {'n_clips': section.n_clips, 'seeds': sorted(set(section.seeds)),
                               'methods': {}, 'provenance': METRIC_PROVENANCE}
    for method in sorted({m.value for m in methods}):
        chosen = [res for res in results if res[0]['method'] == method]
        src_frames = np.concatenate([s for _, s, _ in chosen])
        edit_frames = np.concatenate([e for _, _, e in chosen])
        try:
            fad = frechet_feature_distance(src_frames, edit_frames)
        except InvalidArgumentError:
            fad = None
        summary['methods'][method] = {
            'cqt1_pcc': _mean(r['cqt1_pcc'] for r, _, _ in chosen),
            'clap_analog': _mean(r['clap_analog'] for r, _, _ in chosen),
            'lpaps_analog': _mean(r['lpaps_analog'] for r, _, _ in chosen),
            'fad_analog': fad,
        }
    ctx.writer.json('summary.json', summary)
    return summary


def run_ablate_finetune(ctx: RunContext) -> Dict[str, Any]:
    """Personalization step-count sweep: melody consistency vs concept proximity."""
    config = ctx.config
    section = config.ablation
    if not section.finetune_steps:
        raise InvalidArgumentError('ablate-finetune needs a nonempty finetune_steps grid')
    sched = build_schedule(config)
    base = _load_model(config, config.edit.checkpoint, 'model.json')
    base.register_concept(config.personalize.token)
    refs = reference_set_for(config, base.vocabulary)
    ref_wavs = reference_waveforms(refs)
    vocab = base.vocabulary
    method = DistillMethod(config.edit.method)
    if not method.personalized:
        method = DistillMethod.STEERMUSIC_PLUS
    base_model = ToyDenoiser(base)

    models = {}
    for steps in sorted(set(int(s) for s in section.finetune_steps)):
        tuned = personalize(base, refs, sched, steps, config.personalize.lr, config.personalize.seed)
        models[steps] = ToyDenoiser(tuned)

    def job(key):
        steps, seed = key
        x_src, y_src = source_clip(config.edit, vocab, melody_offset=seed)
        y_tgt = concept_target_prompt(config, y_src, vocab)
        distill = distill_config(config, method, seed=seed)
        result = edit(x_src, y_src, y_tgt, base_model, distill, sched, pdm=models[steps])
        wav_src = resynthesize(x_src, seed=RESYNTH_SEED)
        wav_edit = resynthesize(result.x_edited, seed=RESYNTH_SEED)
        return {'finetune_steps': steps, 'seed': seed,
                'cqt1_pcc': _measure(cqt1_pcc, wav_src, wav_edit)[0],
                'mfcc_cos': concept_proximity(wav_edit, ref_wavs)}

    keys = sorted((steps, int(seed)) for steps in models for seed in section.seeds)
    rows = ctx.parallel_map(job, keys)
    ctx.writer.csv('ablate_finetune.csv', FINETUNE_COLUMNS, rows)
    summary = {'method': method.value, 'by_steps': {
        str(steps): {'cqt1_pcc': _mean(r['cqt1_pcc'] for r in rows if r['finetune_steps'] == steps),
                     'mfcc_cos': _mean(r['mfcc_cos'] for r in rows if r['finetune_steps'] == steps)}
        for steps in models}}
    ctx.writer.json('summary.json', summary)
    return summary
