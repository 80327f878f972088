"""Score variants: FD cross-checks, determinism, read-only guarantee."""

import numpy as np
import pytest

from gradshift.models import (
    Autoencoder, Encoder, EncoderConfig, MaskedAutoencoder, MdnConfig,
    MdnDecoder, ReconConfig, model_hash, normalize_history,
)
from gradshift.scoring import (
    ScoredSample, forecast_loss_tape, gradient_scores, load_scores_csv,
    save_scores_csv, score_corpus, score_grad_all, score_grad_last,
    score_grad_latent, score_loss, score_recon,
)
from gradshift.trajectory import ShiftLabel, SplitSpec, Trajectory

from conftest import FD_STEP, assert_close_rel

SPLIT = SplitSpec(n_past=8, horizon=4)


@pytest.fixture
def models():
    enc = Encoder.init(EncoderConfig(n_past=8, hidden=(12,), latent=6), 0)
    dec = MdnDecoder.init(MdnConfig(latent=6, horizon=4, components=2,
                                    hidden=(12, 6)), 1)
    return enc, dec


def make_traj(seed=0, n=12):
    rng = np.random.default_rng(seed)
    return Trajectory(np.cumsum(rng.normal(size=(n, 2)), axis=0), 10.0,
                      scene_id=f"s{seed}")


def numpy_mdn_nll(logits, mu, var, target):
    """Independent plain-numpy forward of the mixture NLL."""
    diff = mu - target[None]
    log_comp = -0.5 * (np.log(2 * np.pi) * diff[0].size
                       + np.log(var).sum(axis=(1, 2))
                       + (diff ** 2 / var).sum(axis=(1, 2)))
    log_pi = logits - (np.max(logits) + np.log(np.exp(logits - np.max(logits)).sum()))
    joint = log_pi + log_comp
    m = joint.max()
    return -(m + np.log(np.exp(joint - m).sum()))


def decoder_tail_numpy(dec, h, target):
    """Run the decoder head from a trunk value h, in plain numpy."""
    cfg = dec.config
    head = h @ dec.params["head_w"] + dec.params["head_b"]
    k, blk = cfg.components, cfg.block
    logits = head[:k]
    mu = head[k:k + blk].reshape(k, cfg.horizon, 2)
    raw = head[k + blk:].reshape(k, cfg.horizon, 2)
    var = np.logaddexp(0.0, raw) + cfg.var_floor
    return numpy_mdn_nll(logits, mu, var, target)


def decoder_from_latent_numpy(dec, z, target):
    h = z
    for i in range(len(dec.config.hidden)):
        h = np.tanh(h @ dec.params[f"w{i}"] + dec.params[f"b{i}"])
    return decoder_tail_numpy(dec, h, target)


def pipeline_target(enc, traj):
    from gradshift.trajectory import resample_linear, split_history
    first, second = split_history(traj.head(SPLIT.n_past), SPLIT)
    fr = resample_linear(first, SPLIT.n_past)
    sr = resample_linear(second, SPLIT.horizon)
    return fr, sr.points - fr.points[-1]


# ----------------------------------------------------------------------
# gradient scores vs direct perturbation
# ----------------------------------------------------------------------

def test_grad_last_matches_trunk_perturbation(models):
    enc, dec = models
    for seed in range(20):
        traj = make_traj(seed)
        tape, loss, out = forecast_loss_tape(enc, dec, traj, SPLIT)
        analytic = tape.grad_at_mark(loss, "last_layer_input")
        _, target = pipeline_target(enc, traj)
        h0 = out.trunk.value
        numeric = np.zeros_like(h0)
        for i in range(h0.size):
            hp, hm = h0.copy(), h0.copy()
            hp[i] += FD_STEP
            hm[i] -= FD_STEP
            numeric[i] = (decoder_tail_numpy(dec, hp, target)
                          - decoder_tail_numpy(dec, hm, target)) / (2 * FD_STEP)
        assert_close_rel(analytic, numeric)
        s = score_grad_last(enc, dec, traj, SPLIT)
        assert s == pytest.approx(np.linalg.norm(numeric), rel=1e-4)


def test_grad_latent_matches_latent_perturbation(models):
    enc, dec = models
    for seed in range(10):
        traj = make_traj(seed + 100)
        tape, loss, _ = forecast_loss_tape(enc, dec, traj, SPLIT)
        analytic = tape.grad_at_mark(loss, "latent")
        fr, target = pipeline_target(enc, traj)
        z0 = tape.marks["latent"].value
        numeric = np.zeros_like(z0)
        for i in range(z0.size):
            zp, zm = z0.copy(), z0.copy()
            zp[i] += FD_STEP
            zm[i] -= FD_STEP
            numeric[i] = (decoder_from_latent_numpy(dec, zp, target)
                          - decoder_from_latent_numpy(dec, zm, target)) / (2 * FD_STEP)
        assert_close_rel(analytic, numeric)
        assert score_grad_latent(enc, dec, traj, SPLIT) == pytest.approx(
            np.linalg.norm(numeric), rel=1e-4)


def test_grad_all_matches_parameter_perturbation():
    enc = Encoder.init(EncoderConfig(n_past=8, hidden=(6,), latent=4), 3)
    dec = MdnDecoder.init(MdnConfig(latent=4, horizon=4, components=1,
                                    hidden=(5,)), 4)
    traj = make_traj(7)
    sq_total = 0.0
    for name in dec.params:
        base = dec.params[name].copy()
        for i in range(base.size):
            for sign in (+1.0, -1.0):
                dec.params[name].ravel()[i] = base.ravel()[i] + sign * FD_STEP
                val = score_loss(enc, dec, traj, SPLIT)
                if sign > 0:
                    plus = val
                else:
                    minus = val
                dec.params[name].ravel()[i] = base.ravel()[i]
            sq_total += ((plus - minus) / (2 * FD_STEP)) ** 2
    assert score_grad_all(enc, dec, traj, SPLIT) == pytest.approx(
        np.sqrt(sq_total), rel=1e-4)


def test_grad_all_dominates_single_block(models):
    enc, dec = models
    traj = make_traj(9)
    tape, loss, out = forecast_loss_tape(enc, dec, traj, SPLIT)
    grads = tape.backward(loss)
    full = score_grad_all(enc, dec, traj, SPLIT)
    for node in out.params.values():
        assert full >= np.linalg.norm(grads[node.id]) - 1e-12


def test_single_layer_decoder_grad_all_is_that_layer(models):
    enc, _ = models
    dec = MdnDecoder.init(MdnConfig(latent=6, horizon=4, components=2,
                                    hidden=(6,)), 5)
    traj = make_traj(11)
    tape, loss, out = forecast_loss_tape(enc, dec, traj, SPLIT)
    grads = tape.backward(loss)
    blocks = sum(float(np.sum(grads[n.id] ** 2)) for n in out.params.values())
    assert score_grad_all(enc, dec, traj, SPLIT) == pytest.approx(
        np.sqrt(blocks), rel=1e-12)


def test_mu_block_gradient_vanishes_at_crafted_optimum():
    # decoder frozen where mu exactly hits the target: the mean-head rows of
    # the final-layer gradient are analytically zero; the full score is not
    enc = Encoder.init(EncoderConfig(n_past=8, hidden=(6,), latent=4), 6)
    dec = MdnDecoder.init(MdnConfig(latent=4, horizon=4, components=1,
                                    hidden=(5,)), 7)
    traj = make_traj(13)
    _, target = pipeline_target(enc, traj)
    k, blk = dec.config.components, dec.config.block
    dec.params["head_w"][:, k:k + blk] = 0.0
    dec.params["head_b"][k:k + blk] = target.ravel()
    tape, loss, out = forecast_loss_tape(enc, dec, traj, SPLIT)
    grads = tape.backward(loss)
    head_pre_grad = None
    for node in tape.nodes:
        if node.op == "affine" and node is not None and \
                node.value.shape == (dec.config.head_width,):
            head_pre_grad = grads[node.id]
    assert head_pre_grad is not None
    np.testing.assert_allclose(head_pre_grad[:k], 0.0, atol=1e-15)   # pi, K=1
    np.testing.assert_allclose(head_pre_grad[k:k + blk], 0.0, atol=1e-12)
    assert np.linalg.norm(head_pre_grad[k + blk:]) > 0
    assert score_grad_last(enc, dec, traj, SPLIT) > 0


def test_loss_score_perfect_fit_value():
    # K=1 decoder pinned at (target, unit variance): loss = (d/2) ln(2 pi)
    enc = Encoder.init(EncoderConfig(n_past=8, hidden=(6,), latent=4), 8)
    dec = MdnDecoder.init(
        MdnConfig(latent=4, horizon=4, components=1, hidden=(5,),
                  var_floor=1e-12), 9)
    traj = make_traj(17)
    _, target = pipeline_target(enc, traj)
    k, blk = 1, dec.config.block
    dec.params["head_w"][...] = 0.0
    dec.params["head_b"][k:k + blk] = target.ravel()
    dec.params["head_b"][k + blk:] = np.log(np.expm1(1.0 - 1e-12))
    d = 4 * 2
    assert score_loss(enc, dec, traj, SPLIT) == pytest.approx(
        0.5 * d * np.log(2 * np.pi), abs=1e-9)


# ----------------------------------------------------------------------
# determinism and purity
# ----------------------------------------------------------------------

def test_duplicate_samples_identical_scores(models):
    enc, dec = models
    t1 = make_traj(21)
    t2 = Trajectory(t1.points.copy(), t1.rate_hz, scene_id="dup")
    for fn in (score_grad_last, score_grad_latent, score_grad_all, score_loss):
        assert fn(enc, dec, t1, SPLIT) == fn(enc, dec, t2, SPLIT)


def test_scoring_is_read_only(models):
    enc, dec = models
    ae = Autoencoder.init(ReconConfig(n_past=8, hidden=(12,), latent=6), 2)
    mae = MaskedAutoencoder.init(ReconConfig(n_past=8, hidden=(12,), latent=6), 3)
    hashes = [model_hash(m) for m in (enc, dec, ae, mae)]
    corpus = [make_traj(s) for s in range(6)]
    score_corpus(corpus, SPLIT,
                 ("grad_last", "grad_latent", "grad_all", "loss",
                  "recon_ae", "recon_mae"),
                 encoder=enc, decoder=dec, ae=ae, mae=mae)
    assert [model_hash(m) for m in (enc, dec, ae, mae)] == hashes


def test_scores_independent_of_batch_order(models):
    enc, dec = models
    ae = Autoencoder.init(ReconConfig(n_past=8, hidden=(12,), latent=6), 2)
    mae = MaskedAutoencoder.init(ReconConfig(n_past=8, hidden=(12,), latent=6), 3)
    corpus = [make_traj(s) for s in range(8)]
    kw = dict(encoder=enc, decoder=dec, ae=ae, mae=mae)
    variants = ("grad_last", "loss", "recon_ae", "recon_mae")
    fwd = score_corpus(corpus, SPLIT, variants, **kw).rows
    rev = score_corpus(corpus[::-1], SPLIT, variants, **kw).rows
    key = lambda r: (r.sample_id, r.variant)
    assert sorted(((r.sample_id, r.variant, r.score) for r in fwd)) == \
        sorted(((r.sample_id, r.variant, r.score) for r in rev))


def test_mae_scoring_fixed_mask_count_reproducible(models):
    mae = MaskedAutoencoder.init(ReconConfig(n_past=8, hidden=(12,), latent=6), 3)
    t = make_traj(33)
    s1 = score_recon(mae, t, SPLIT, n_masks=1, base_seed=5)
    s2 = score_recon(mae, t, SPLIT, n_masks=1, base_seed=5)
    assert s1 == s2
    assert score_recon(mae, t, SPLIT, n_masks=1, base_seed=6) != s1


def test_recon_perfect_zero(models):
    ae = Autoencoder.init(ReconConfig(n_past=8, hidden=(12,), latent=6), 2)
    t = make_traj(41)
    for v in ae.params.values():
        v[...] = 0.0
    ae.params["d_b1"][...] = normalize_history(t.points[:8]).ravel()
    assert score_recon(ae, t, SPLIT) == pytest.approx(0.0, abs=1e-18)


# ----------------------------------------------------------------------
# driver and CSV
# ----------------------------------------------------------------------

def test_scored_sample_validation():
    with pytest.raises(ValueError, match="non-finite"):
        ScoredSample("a", "grad_last", float("nan"))
    with pytest.raises(ValueError, match=">= 0"):
        ScoredSample("a", "grad_last", -1.0)
    ScoredSample("a", "loss", -3.5)  # loss may be negative


def test_score_corpus_row_count_and_labels(models):
    enc, dec = models
    corpus = [make_traj(s) for s in range(5)]
    for t in corpus[:2]:
        t.label = ShiftLabel("turn_left", 2.0)
    run = score_corpus(corpus, SPLIT, ("grad_last", "loss"),
                       encoder=enc, decoder=dec)
    assert len(run.rows) == 10
    assert run.mean_gradient_ms > 0
    labeled = [r for r in run.rows if r.label is not None
               and r.label.kind == "turn_left"]
    assert len(labeled) == 4


def test_score_corpus_rejects_unknown_variant(models):
    enc, dec = models
    with pytest.raises(ValueError, match="unknown score variants"):
        score_corpus([make_traj(1)], SPLIT, ("energy",),
                     encoder=enc, decoder=dec)
    with pytest.raises(ValueError, match="needs"):
        score_corpus([make_traj(1)], SPLIT, ("recon_ae",))


def test_scores_csv_roundtrip(tmp_path, models):
    enc, dec = models
    corpus = [make_traj(s) for s in range(3)]
    corpus[0].label = ShiftLabel("over_speed", 17.5)
    corpus[1].label = ShiftLabel("in_distribution")
    run = score_corpus(corpus, SPLIT, ("grad_last", "loss"),
                       encoder=enc, decoder=dec)
    path = tmp_path / "scores.csv"
    save_scores_csv(path, run.rows)
    loaded = load_scores_csv(path)
    assert len(loaded) == len(run.rows)
    for a, b in zip(run.rows, loaded):
        assert (a.sample_id, a.variant, a.label) == (b.sample_id, b.variant, b.label)
        assert a.score == b.score  # repr round-trip is exact
