import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptrevert.core import (
    ImageTensor,
    InversionConfig,
    LatentTextEmbedding,
    NoiseSpec,
)
from promptrevert.optimizer import (
    GLOBAL_SCANS,
    OptimizationError,
    PipelineStageError,
    VocabEmbeddingTable,
    discrete_invert,
    invert,
    project_to_vocab,
    random_embedding_like,
    refine_embedding,
)


# -- projection ----------------------------------------------------------------


def _table(seed=0, rows=64, dim=8):
    rng = np.random.default_rng(seed)
    return VocabEmbeddingTable(rng.standard_normal((rows, dim)))


def _exhaustive_nn(vector, matrix):
    best_id, best_dist = 0, None
    for row_id in range(matrix.shape[0]):
        dist = np.sum((matrix[row_id] - vector) ** 2)
        if best_dist is None or dist < best_dist:
            best_id, best_dist = row_id, dist
    return best_id


def test_project_exact_row_returns_itself():
    table = _table()
    assert project_to_vocab(table.matrix[5], table) == 5


def test_project_tie_breaks_to_lowest_id():
    table = _table(1)
    midpoint = (table.matrix[3] + table.matrix[9]) / 2.0
    assert project_to_vocab(midpoint, table) == 3


def test_project_matches_exhaustive_scan_oracle():
    table = _table(2)
    rng = np.random.default_rng(3)
    for _ in range(1000):
        query = rng.standard_normal(8) * rng.uniform(0.1, 3.0)
        assert project_to_vocab(query, table) == _exhaustive_nn(query, table.matrix)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_project_idempotent_property(seed):
    table = _table(4)
    rng = np.random.default_rng(seed)
    query = rng.standard_normal(8)
    first = project_to_vocab(query, table)
    assert project_to_vocab(table.matrix[first], table) == first


def test_project_rejects_empty_table_and_bad_dims():
    with pytest.raises(ValueError):
        VocabEmbeddingTable(np.zeros((0, 4)))
    table = _table()
    with pytest.raises(ValueError):
        project_to_vocab(np.zeros(3), table)


# -- continuous refinement -------------------------------------------------------


def test_refine_fixed_point_at_global_minimum(toy_backend):
    c0 = toy_backend.encode_text(toy_backend.tokenizer.prompt("a red cat"))
    noise = NoiseSpec(70, toy_backend.latent_shape)
    target = toy_backend.generate(c0, noise, 5)
    cfg = InversionConfig(max_epoch=20, noise_seed=70)
    refined, trace = refine_embedding(toy_backend, c0, noise, target, cfg)
    assert np.array_equal(refined.values, c0.values)
    assert trace.losses == [0.0] * 21
    assert len(trace.losses) == cfg.max_epoch + 1


def test_refine_trace_has_max_epoch_plus_one_entries(toy_backend, fixture_suite):
    f = fixture_suite[0]
    cfg = f.config(max_epoch=17)
    c0 = toy_backend.encode_text(toy_backend.tokenizer.prompt(f.caption_text, length=16))
    _, trace = refine_embedding(toy_backend, c0, f.noise, f.target, cfg)
    assert len(trace.losses) == 18
    assert len(trace.grad_norms) == 17


def test_refine_latent_sse_monotone_under_stability_bound(toy_backend, fixture_suite):
    # eigenvalue bound computed from the analytic quadratic: probe the
    # affine map c -> z0 column by column, then bound the Hessian 2 P^T P.
    f = fixture_suite[0]
    L, d = toy_backend.seq_len, toy_backend.embed_dim
    base = toy_backend._final_latent(LatentTextEmbedding(np.zeros((L, d))), f.noise)
    columns = []
    for i in range(L):
        for j in range(d):
            probe = np.zeros((L, d))
            probe[i, j] = 1.0
            columns.append(
                toy_backend._final_latent(LatentTextEmbedding(probe), f.noise) - base
            )
    p_matrix = np.stack(columns, axis=1)
    lam_max = 2.0 * np.linalg.norm(p_matrix, 2) ** 2
    lr = 0.9 / lam_max

    c0 = toy_backend.encode_text(toy_backend.tokenizer.prompt(f.caption_text, length=16))
    cfg = f.config(max_epoch=150, learning_rate=lr, loss_kind="latent_sse")
    _, trace = refine_embedding(toy_backend, c0, f.noise, f.target, cfg)
    losses = np.array(trace.losses)
    assert np.all(np.diff(losses) <= 1e-12)
    assert losses[-1] < losses[0]


def test_refine_halves_loss_on_every_fixture(toy_backend, fixture_suite, suite_captioner):
    for fixture in fixture_suite:
        caption = suite_captioner.caption(fixture.target)
        c0 = toy_backend.encode_text(caption)
        cfg = fixture.config()
        _, trace = refine_embedding(toy_backend, c0, fixture.noise, fixture.target, cfg)
        assert trace.losses[-1] <= 0.5 * trace.losses[0]


def test_refine_does_not_touch_backend_params(toy_backend, fixture_suite):
    f = fixture_suite[1]
    before = toy_backend.params_digest()
    c0 = toy_backend.encode_text(toy_backend.tokenizer.prompt(f.caption_text, length=16))
    refine_embedding(toy_backend, c0, f.noise, f.target, f.config(max_epoch=5))
    assert toy_backend.params_digest() == before


def test_refine_writes_trace_file(toy_backend, fixture_suite, tmp_path):
    f = fixture_suite[2]
    c0 = toy_backend.encode_text(toy_backend.tokenizer.prompt(f.caption_text, length=16))
    trace_path = tmp_path / "trace.jsonl"
    refine_embedding(
        toy_backend, c0, f.noise, f.target, f.config(max_epoch=4), trace_path=trace_path
    )
    lines = [json.loads(l) for l in trace_path.read_text().splitlines()]
    assert len(lines) == 4
    assert set(lines[0]) == {"epoch", "loss", "grad_norm"}


def test_refine_aborts_on_divergence(toy_backend, fixture_suite):
    f = fixture_suite[3]
    c0 = toy_backend.encode_text(toy_backend.tokenizer.prompt(f.caption_text, length=16))
    # a absurd learning rate blows the quadratic up to inf within the run
    cfg = f.config(max_epoch=400, learning_rate=5e4, loss_kind="latent_sse")
    with pytest.raises(OptimizationError, match="epoch"):
        refine_embedding(toy_backend, c0, f.noise, f.target, cfg)


def test_random_init_matches_reference_scale(toy_backend, fixture_suite):
    refs = [
        toy_backend.encode_text(toy_backend.tokenizer.prompt(f.caption_text, length=16))
        for f in fixture_suite
    ]
    rand = random_embedding_like(refs, seed=9)
    stacked = np.stack([r.values for r in refs])
    assert rand.values.shape == refs[0].values.shape
    assert rand.values.std() == pytest.approx(stacked.std(), rel=0.2)
    assert np.array_equal(rand.values, random_embedding_like(refs, seed=9).values)


def test_caption_init_beats_random_init(toy_backend, fixture_suite, suite_captioner):
    caption_wins = 0
    caption_finals, random_finals = [], []
    for i, fixture in enumerate(fixture_suite):
        cfg = fixture.config()
        c_cap = toy_backend.encode_text(suite_captioner.caption(fixture.target))
        _, cap_trace = refine_embedding(toy_backend, c_cap, fixture.noise, fixture.target, cfg)
        refs = [c_cap]
        c_rand = random_embedding_like(refs, seed=5000 + i)
        _, rand_trace = refine_embedding(toy_backend, c_rand, fixture.noise, fixture.target, cfg)
        caption_finals.append(cap_trace.losses[-1])
        random_finals.append(rand_trace.losses[-1])
        caption_wins += cap_trace.losses[-1] < rand_trace.losses[-1]
    assert caption_wins >= 8
    assert np.mean(caption_finals) < np.mean(random_finals)


# -- full pipeline ----------------------------------------------------------------


def test_invert_degenerate_zero_epochs(toy_backend, fixture_suite, suite_captioner, trained_bundle):
    from promptrevert import e2t

    fixture = fixture_suite[0]
    cfg = fixture.config(max_epoch=0)
    result = invert(toy_backend, suite_captioner, trained_bundle, fixture.target, cfg)
    caption = suite_captioner.caption(fixture.target)
    c0 = toy_backend.encode_text(caption)
    expected = e2t.invert_embedding(trained_bundle, c0, cfg.beam_width, cfg.correction_steps)
    assert result.prompt == expected
    assert len(result.loss_trace) == 1


def test_invert_labels_failing_stage(toy_backend, fixture_suite, trained_bundle):
    from promptrevert.captioner import FixtureCaptioner

    empty_captioner = FixtureCaptioner({}, toy_backend.tokenizer)
    fixture = fixture_suite[0]
    with pytest.raises(PipelineStageError, match="caption"):
        invert(toy_backend, empty_captioner, trained_bundle, fixture.target, fixture.config())


def test_invert_end_to_end_token_f1(toy_backend, fixture_suite, suite_captioner, trained_bundle):
    from promptrevert.eval import token_f1

    scores = []
    for fixture in fixture_suite:
        result = invert(
            toy_backend, suite_captioner, trained_bundle, fixture.target, fixture.config()
        )
        _, _, f1 = token_f1(result.prompt, fixture.ground_truth)
        scores.append(f1)
    assert all(f1 >= 0.8 for f1 in scores)


# -- discrete baseline ---------------------------------------------------------------


def test_discrete_outputs_valid_vocab_ids(toy_backend, fixture_suite):
    fixture = fixture_suite[0]
    prompt = discrete_invert(toy_backend, fixture.target, fixture.config(max_epoch=10))
    assert all(0 <= t < toy_backend.tokenizer.vocab_size for t in prompt.token_ids)
    assert len(prompt.token_ids) == toy_backend.seq_len


def test_discrete_zero_epochs_returns_init_prompt(toy_backend, fixture_suite):
    fixture = fixture_suite[0]
    init = toy_backend.tokenizer.prompt("a red cat near a beach", length=16)
    out = discrete_invert(
        toy_backend, fixture.target, fixture.config(max_epoch=0), init_prompt=init
    )
    assert out.token_ids == init.token_ids


def test_discrete_scans_vs_continuous_scans(toy_backend, fixture_suite, suite_captioner):
    fixture = fixture_suite[0]
    cfg = fixture.config(max_epoch=8)

    GLOBAL_SCANS.reset()
    c0 = toy_backend.encode_text(suite_captioner.caption(fixture.target))
    refine_embedding(toy_backend, c0, fixture.noise, fixture.target, cfg)
    assert GLOBAL_SCANS.count == 0  # continuous path never scans the vocabulary

    table = VocabEmbeddingTable(toy_backend.embedding_matrix)
    discrete_invert(toy_backend, fixture.target, cfg, table=table)
    assert table.scans.count >= cfg.max_epoch * toy_backend.seq_len
