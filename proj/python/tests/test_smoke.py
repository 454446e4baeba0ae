import math

import numpy as np
import pytest

import avarc

TOK_CFG = {
    "vocab": 6,
    "feat_channels": 4,
    "hidden_channels": 4,
    "image_height": 12,
    "image_width": 12,
    "schedule": [[1, 1], [2, 2], [3, 3]],
}


def model_cfg(n_classes=3):
    return {
        "n_classes": n_classes,
        "vocab": 6,
        "feat_channels": 4,
        "schedule": [[1, 1], [2, 2], [3, 3]],
        "width": 8,
        "depth": 1,
        "heads": 2,
        "mlp_ratio": 2,
        "init_std": 0.5,
        "zero_head": False,
        "seed": 3,
    }


@pytest.fixture(scope="module")
def parts():
    tok = avarc.Tokenizer(TOK_CFG)
    model = avarc.Model(model_cfg(), tok.codebook)
    rng = np.random.default_rng(0)
    images = [rng.uniform(size=(12, 12)) for _ in range(4)]
    return tok, model, images


def test_schedule_arithmetic():
    ref = avarc.ScaleSchedule.reference()
    assert ref.total_tokens() == 680
    assert ref.prefix_tokens(5) == 55
    assert avarc.ScaleSchedule.desk().total_tokens() == 88


def test_tokenize_round_trip(parts):
    tok, _, images = parts
    tokens = tok.tokenize(images[0])
    assert [g.shape for g in tokens.grids] == [(1, 1), (2, 2), (3, 3)]
    assert all(((g >= 0) & (g < 6)).all() for g in tokens.grids)
    assert tok.decode(tokens).shape == (1, 12, 12)
    same = avarc.TokenMap(tokens.schedule, tokens.grids)
    assert same.flatten() == tokens.flatten()


def test_likelihood_normalizes_over_first_scale(parts):
    tok, model, images = parts
    tokens = tok.tokenize(images[0])
    grids = tokens.grids
    total = 0.0
    for v in range(6):
        g = [x.copy() for x in grids]
        g[0][0, 0] = v
        total += math.exp(avarc.log_likelihood(avarc.TokenMap(tokens.schedule, g), 1, model, k_prime=1))
    assert total == pytest.approx(1.0, abs=1e-9)
    full = avarc.log_likelihood(tokens, 1, model)
    per_token = sum(float(g.sum()) for g in avarc.token_log_probs(tokens, 1, model))
    assert full == pytest.approx(per_token, rel=1e-12)


def test_classification(parts):
    tok, model, images = parts
    for img in images:
        scores = avarc.score_labels(img, model, tok)
        ex = avarc.classify_exhaustive(img, model, tok)
        assert ex["prediction"] == int(np.argmax(scores))
        single = avarc.classify(img, model, tok, plan=[{"keep": 1, "method": "full"}])
        assert single["prediction"] == ex["prediction"]
        staged = avarc.classify(img, model, tok)
        assert 0 <= staged["prediction"] < 3
        assert staged["trace"]["stages"]
    post = avarc.posterior([-1.0, -2.0])
    assert sum(post) == pytest.approx(1.0)
    assert avarc.default_plan(100)[0]["method"] == "partial"


def test_pmi_and_errors(parts):
    tok, model, images = parts
    tokens = tok.tokenize(images[1])
    diff = avarc.contrastive_pmi(tokens, 0, 2, model)
    ratio = avarc.log_likelihood(tokens, 0, model) - avarc.log_likelihood(tokens, 2, model)
    assert sum(float(g.sum()) for g in diff) == pytest.approx(ratio, rel=1e-9)
    with pytest.raises(avarc.AvarcError):
        avarc.token_pmi(tokens, 0, model)
    with pytest.raises(avarc.AvarcError):
        avarc.log_likelihood(tokens, 7, model)
    with pytest.raises(avarc.AvarcError):
        avarc.classify(images[0], model, tok, plan=[{"keep": 1, "method": "magic"}])


def test_training_and_save(parts, tmp_path):
    tok, model, images = parts
    tokens = [tok.tokenize(im) for im in images]
    labels = [0, 1, 2, 0]
    trained = avarc.train_mle(tokens, labels, model, {"epochs": 2, "batch_size": 2, "warmup_steps": 1})
    tuned = avarc.finetune_cca(tokens, labels, trained, {"epochs": 1, "batch_size": 2})
    path = tmp_path / "m.ckpt"
    tuned.save(path)
    back = avarc.Model.load(path)
    assert back.n_classes == 3
    assert avarc.log_likelihood(tokens[0], 0, back) == pytest.approx(avarc.log_likelihood(tokens[0], 0, tuned), rel=1e-5)
    tpath = tmp_path / "t.ckpt"
    tok.save(tpath)
    assert avarc.Tokenizer.load(tpath).vocab == 6
