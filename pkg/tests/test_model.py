import numpy as np
import pytest
import torch

from vtg.data import SynthSpec, synth_generate
from vtg.model import (
    Example,
    GroundingModel,
    ModelConfig,
    TrainConfig,
    answer_loss,
    build_batch,
    encode_video,
    evaluate_mr,
    generate,
    load_checkpoint,
    make_tokenizer,
    prepare_examples,
    prompt_block,
    random_span_baseline,
    save_checkpoint,
    train,
)
from vtg.numerics import max_rel_error
from vtg.ste import TokenGrid
from vtg.time_tokens import TIME_CHARS

CFG = ModelConfig(frames=8, tokens_per_frame=4, d=16, slots=8, time_rows=128)


@pytest.fixture(scope="module")
def setup():
    tok = make_tokenizer([])
    pairs = synth_generate(SynthSpec({"MR": 12}), seed=0)
    return tok, prepare_examples(pairs, tok, CFG)


def grids_for(examples, cfg=CFG, mode="test"):
    return [encode_video(ex.video, cfg, mode, 0) for ex in examples]


def logits(model, examples):
    inp, _, _ = build_batch(examples, model.tokenizer, model.cfg)
    with torch.no_grad():
        return model(grids_for(examples, model.cfg), inp)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(frames=2, tokens_per_frame=2, slots=8)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"frames": 8, "colour": "red"})
    assert ModelConfig.from_dict(CFG.to_dict()) == CFG
    big = ModelConfig.full_scale()
    assert (big.frames, big.tokens_per_frame, big.slots) == (96, 32, 256)


def test_encode_video_test_midpoints(setup):
    _, exs = setup
    cfg = ModelConfig(frames=96, tokens_per_frame=2, d=8, slots=8)
    video = exs[0].video
    video = type(video)(video.video_id, 96.0, [], 1)
    g = encode_video(video, cfg, "test")
    np.testing.assert_allclose(g.frame_times, np.arange(96) + 0.5)
    assert g.values.shape == (96, 2, 8)


@pytest.mark.parametrize("n", [4, 96])
def test_visual_emits_k_slots(setup, n):
    tok, _ = setup
    cfg = ModelConfig(frames=96, tokens_per_frame=2, d=8, slots=8, time_rows=128)
    model = GroundingModel(cfg, tok)
    rng = np.random.default_rng(0)
    grid = TokenGrid(rng.normal(size=(n, 2, 8)), np.linspace(0, 90, n))
    with torch.no_grad():
        vis, w = model.visual([grid, grid], return_weights=True)
    assert vis.shape == (2, 8, 8)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 8), atol=1e-6, rtol=0)


def test_time_tokens_tie_with_digits_at_init(setup):
    tok, exs = setup
    model = GroundingModel(CFG, tok)
    lg = logits(model, exs[:4])
    digits = tok.vocab.digit_token_ids
    for c, t_id in zip(TIME_CHARS, tok.vocab.time_token_ids):
        assert torch.equal(lg[..., digits[c]], lg[..., t_id])


def test_time_embedding_is_a_no_op_at_init(setup):
    tok, exs = setup
    on = GroundingModel(CFG, tok, seed=3)
    off = GroundingModel(ModelConfig(**{**CFG.to_dict(), "use_time_embedding": False}), tok, seed=3)
    assert torch.equal(logits(on, exs[:4]), logits(off, exs[:4]))


def test_same_seed_same_init(setup):
    tok, _ = setup
    a, b = GroundingModel(CFG, tok, seed=5), GroundingModel(CFG, tok, seed=5)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = GroundingModel(CFG, tok, seed=6)
    assert not torch.equal(a.phi, c.phi)


def test_prompt_layout(setup):
    tok, exs = setup
    block = prompt_block(tok, exs[0].prompt_ids, CFG)
    assert len(block) == CFG.max_prompt_len and block[-1] == tok.ans_id
    inp, tgt, mask = build_batch(exs[:3], tok, CFG)
    for i, ex in enumerate(exs[:3]):
        assert int(mask[i].sum()) == len(ex.answer_ids) + 1
        assert tgt[i][mask[i]].tolist() == ex.answer_ids + [tok.eos_id]


def test_loss_ignores_prompt_targets(setup):
    tok, exs = setup
    model = GroundingModel(CFG, tok)
    grids = grids_for(exs[:2])
    base = answer_loss(model, exs[:2], grids, "test")
    assert torch.isfinite(base) and base.item() > 0
    # swapping the prompt wording changes inputs but only answer targets are scored
    inp, tgt, mask = build_batch(exs[:2], tok, CFG)
    assert not mask[:, : CFG.max_prompt_len - 1].any()


def test_zero_steps_leave_parameters(setup):
    tok, exs = setup
    model = GroundingModel(CFG, tok)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    res = train(exs, model, TrainConfig(steps=0))
    assert res.losses == []
    for n, p in model.named_parameters():
        assert torch.equal(before[n], p)


def test_training_is_deterministic_and_marks_rows(setup):
    tok, exs = setup
    runs = []
    for _ in range(2):
        model = GroundingModel(CFG, tok, seed=1)
        res = train(exs, model, TrainConfig(steps=5, batch_size=4, seed=2))
        runs.append((res.losses, model))
    assert runs[0][0] == runs[1][0]
    assert all(np.isfinite(runs[0][0]))
    for p, q in zip(runs[0][1].parameters(), runs[1][1].parameters()):
        assert torch.equal(p, q)
    model = runs[0][1]
    assert model.trained
    # the SteTable view tracks the live parameter
    np.testing.assert_array_equal(model.table.time_weight, model.time_weight.detach().numpy())
    assert np.abs(model.table.time_weight[sorted(model.trained)]).sum() > 0


def test_training_reduces_loss(setup):
    tok, exs = setup
    model = GroundingModel(CFG, tok)
    res = train(exs, model, TrainConfig(steps=60, batch_size=8))
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])


def test_bad_optimizer(setup):
    tok, exs = setup
    with pytest.raises(ValueError):
        train(exs, GroundingModel(CFG, tok), TrainConfig(steps=1, optimizer="lbfgs"))
    with pytest.raises(ValueError):
        train([], GroundingModel(CFG, tok), TrainConfig(steps=1))


@pytest.fixture(scope="module")
def trained_model(setup):
    tok, exs = setup
    model = GroundingModel(CFG, tok)
    train(exs, model, TrainConfig(steps=30, batch_size=8))
    return model


def test_generation_is_seeded(setup, trained_model):
    _, exs = setup
    grids = grids_for(exs[:4])
    prompts = [ex.prompt_ids for ex in exs[:4]]
    a = generate(trained_model, grids, prompts, 1.0, seed=7)
    assert a == generate(trained_model, grids, prompts, 1.0, seed=7)
    assert all(len(x) <= CFG.max_answer_len for x in a)
    with pytest.raises(ValueError):
        generate(trained_model, grids, prompts, 0.0)


def greedy(model, grid, prompt):
    tok, cfg = model.tokenizer, model.cfg
    ids = prompt_block(tok, prompt, cfg)
    out = []
    with torch.no_grad():
        vis = model.visual([grid])
        while len(out) < cfg.max_answer_len and len(ids) < cfg.max_text_len:
            nxt = int(model.decode(vis, torch.tensor([ids]))[0, -1].argmax())
            if nxt == tok.eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
    return out


def test_tiny_temperature_is_argmax(setup, trained_model):
    _, exs = setup
    grids = grids_for(exs[:4])
    got = generate(trained_model, grids, [ex.prompt_ids for ex in exs[:4]], 1e-9, seed=3)
    for g, ex, out in zip(grids, exs[:4], got):
        assert out == greedy(trained_model, g, ex.prompt_ids)


def test_evaluate_mr_reports(setup, trained_model):
    _, exs = setup
    m, preds, texts = evaluate_mr(trained_model, exs[:6], temperature=0.1)
    assert set(m) == {"R@1_IoU0.5", "R@1_IoU0.7", "parse_rate", "n"}
    assert m["n"] == 6 and len(preds) == len(texts) == 6
    assert 0 <= m["R@1_IoU0.7"] <= m["R@1_IoU0.5"] <= 1
    assert m == evaluate_mr(trained_model, exs[:6], temperature=0.1)[0]


def test_checkpoint_round_trip(tmp_path, setup, trained_model):
    _, exs = setup
    path = tmp_path / "m.pt"
    save_checkpoint(trained_model, path)
    back = load_checkpoint(path)
    assert back.cfg == trained_model.cfg
    assert back.trained == trained_model.trained
    assert back.tokenizer.tokens == trained_model.tokenizer.tokens
    assert torch.equal(logits(back, exs[:3]), logits(trained_model, exs[:3]))


def test_random_baseline_is_low(setup):
    _, exs = setup
    gts = [ex.annotation.events[0] for ex in exs]
    r = random_span_baseline(gts, [ex.annotation.duration for ex in exs], trials=50)
    assert r["R@1_IoU0.5"] < 0.2


def micro_model(seed):
    tok = make_tokenizer([])
    cfg = ModelConfig(frames=2, tokens_per_frame=2, d=4, slots=2, time_rows=16, n_heads=2, max_prompt_len=6, max_answer_len=4)
    model = GroundingModel(cfg, tok, seed=seed, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        model.time_weight.copy_(torch.tensor(rng.normal(0, 0.5, (16, 4))))
    model.table.mark_trained([3, 7, 11])
    grid = TokenGrid(rng.normal(size=(2, 2, 4)), [2.2, 9.0])
    ex = Example(None, None, [tok.index["at"]], [tok.index["<t_1>"], tok.index["<t_dot>"]])
    return model, ex, grid


def end_to_end_fd_error(seed, h=1e-5):
    model, ex, grid = micro_model(seed)
    loss = lambda: answer_loss(model, [ex], [grid], "test")  # noqa: E731
    model.zero_grad()
    loss().backward()
    worst = 0.0
    for p in (model.phi, model.time_weight):
        analytic = p.grad.detach().numpy().copy()
        numeric = np.zeros_like(analytic)
        with torch.no_grad():
            for idx in np.ndindex(*analytic.shape):
                old = p[idx].item()
                p[idx] = old + h
                up = loss().item()
                p[idx] = old - h
                down = loss().item()
                p[idx] = old
                numeric[idx] = (up - down) / (2 * h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_matches_fd(seed):
    assert end_to_end_fd_error(seed) < 1e-3
