"""End-to-end smoke checks for the python extension module."""

import math

import ssmlora


def approx(a, b, tol=1e-12):
    return abs(a - b) <= tol


def test_param_accounting():
    lora = ssmlora.count_params("dense-lora", 24, 1024, 8, "lora")
    ssm = ssmlora.count_params("alternating", 24, 1024, 8, "ssmlora")
    assert lora == 786432, lora
    assert ssm == 396288, ssm
    assert approx(ssm / lora, 0.5 + 8 / (2 * 1024))


def test_normalize_state():
    out = ssmlora.normalize_state([3.0, -1.0, 1.0])
    assert all(0.0 <= v < 1.0 for v in out), out
    assert out[1] == 0.0
    assert ssmlora.normalize_state([2.5, 2.5, 2.5]) == [0.0, 0.0, 0.0]


def make_model(plan="alternating"):
    cfg = ssmlora.EncoderConfig()
    cfg.layers = 2
    cfg.width = 16
    cfg.heads = 2
    cfg.ffn_width = 32
    cfg.vocab = 8
    cfg.max_seq = 8
    cfg.classes = 8
    model = ssmlora.Model(cfg, seed=7)
    adapter = ssmlora.AdapterConfig()
    adapter.rank = 4
    adapter.dropout = 0.0
    model.attach(plan, adapter, seed=8)
    return model


def test_zero_init_transparency():
    cfg = ssmlora.EncoderConfig()
    cfg.layers = 2
    cfg.width = 16
    cfg.heads = 2
    cfg.ffn_width = 32
    cfg.vocab = 8
    cfg.max_seq = 8
    cfg.classes = 8
    bare = ssmlora.Model(cfg, seed=7)
    adapted = make_model()
    tokens = [1, 2, 3, 4, 5, 6, 0, 7]
    a = bare.forward(tokens, 2, 4)
    b = adapted.forward(tokens, 2, 4)
    assert a == b, "fresh adapters must not move the logits"
    assert len(b) == 2 and len(b[0]) == 8
    assert all(math.isfinite(v) for row in b for v in row)


def test_train_eval_gradcheck():
    model = make_model()
    assert model.adapter_params == 2 * (16 * 4 + 4 * 16 + 2 * 4 * 4)

    task = ssmlora.TaskSpec()
    task.kind = "copy_classify"
    task.vocab = 8
    task.seq_len = 8
    task.n_train = 32
    task.n_eval = 32
    task.seed = 1

    before = model.base_hash
    opts = ssmlora.TrainOptions()
    opts.lr = 0.01
    opts.batch_size = 16
    opts.max_epochs = 3
    opts.patience = 3
    metrics = model.train(task, opts)
    assert len(metrics.epochs) == 3
    assert metrics.epochs[-1].train_loss < metrics.epochs[0].train_loss
    assert model.base_hash == before, "training must not touch frozen weights"

    result = model.evaluate(task, batch_size=16)
    assert result.count == 32
    assert 0.0 <= result.accuracy <= 1.0
    assert result.by_length[0].seq_len == 8

    report = model.gradcheck(task, coords=8, delta=1e-5, seed=3, batch_size=4)
    assert report.coords_checked > 0
    assert report.max_rel_err < 1e-5, report.worst.name


def test_errors_surface():
    cfg = ssmlora.EncoderConfig()
    cfg.layers = 2
    cfg.width = 16
    cfg.heads = 3  # width not divisible by heads
    try:
        ssmlora.Model(cfg, seed=1)
    except ssmlora.SsmloraError:
        pass
    else:
        raise AssertionError("invalid config must raise")


def main():
    tests = [
        test_param_accounting,
        test_normalize_state,
        test_zero_init_transparency,
        test_train_eval_gradcheck,
        test_errors_surface,
    ]
    for test in tests:
        test()
        print(f"ok {test.__name__}")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    main()
