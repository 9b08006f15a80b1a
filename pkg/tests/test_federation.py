import numpy as np
import pytest

from conftest import make_cfg
from fedprompt import autodiff as ad
from fedprompt.autodiff import ShapeError
from fedprompt.config import scoring_config
from fedprompt.federation import (
    CheckpointMismatch,
    ClientPayload,
    CommLedger,
    LocalTrainSettings,
    TrainingDiverged,
    _pairwise_mean,
    aggregate,
    client_local_train,
    ledger_report,
    load_checkpoint,
    save_checkpoint,
    select_clients,
    train_selected,
)
from fedprompt.model import batch_loss
from fedprompt.promptformer import init_promptformer, param_count
from fedprompt.runner import build_setup, run_federation
from fedprompt.seeding import generator


def settings_for(cfg, **over):
    values = dict(iters=cfg.local_iters, lr=cfg.lr, momentum=cfg.momentum,
                  weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                  lora_threshold=cfg.lora_threshold, lora_rank=cfg.lora_rank,
                  lora_scale=cfg.lora_scale)
    values.update(over)
    return LocalTrainSettings(**values)


# ---------------------------------------------------------------------------
# selection


def test_select_all_at_full_participation():
    assert select_clients(0, 0, list(range(7)), 1.0) == list(range(7))


def test_select_fraction_of_fifty():
    picked = select_clients(3, 2, list(range(50)), 0.1)
    assert len(picked) == 5
    assert picked == sorted(picked)
    assert len(set(picked)) == 5


def test_select_deterministic_and_round_dependent():
    a = select_clients(9, 4, list(range(20)), 0.3)
    b = select_clients(9, 4, list(range(20)), 0.3)
    c = select_clients(9, 5, list(range(20)), 0.3)
    assert a == b
    assert a != c or select_clients(9, 6, list(range(20)), 0.3) != a


def test_select_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        select_clients(0, 0, [], 1.0)


# ---------------------------------------------------------------------------
# aggregation


def payload_of(cid, kind, tensors, loss=1.0):
    return ClientPayload(client_id=cid, kind=kind,
                         tensors={k: np.asarray(v) for k, v in tensors.items()},
                         param_count=sum(np.asarray(v).size for v in tensors.values()),
                         train_loss=loss)


def fresh_server(cfg=None):
    setup = build_setup(cfg or make_cfg())
    return setup.server, setup


def full_tensors(params, fill=None, rng=None):
    out = {}
    for name, t in params.named().items():
        if rng is not None:
            out[name] = rng.normal(size=t.data.shape).astype(t.data.dtype)
        else:
            out[name] = np.full(t.data.shape, fill, dtype=t.data.dtype)
    return out


def test_aggregate_identical_payloads_idempotent():
    server, _ = fresh_server()
    rng = np.random.default_rng(0)
    tensors = full_tensors(server.global_params, rng=rng)
    p1 = payload_of(0, "full_params", tensors)
    p2 = payload_of(1, "full_params", {k: v.copy() for k, v in tensors.items()})
    aggregate(server, [p1, p2])
    for name, t in server.global_params.named().items():
        assert (t.data == tensors[name]).all()
    assert server.round == 1


def test_aggregate_two_payload_mean():
    server, _ = fresh_server()
    a = full_tensors(server.global_params, fill=1.0)
    b = full_tensors(server.global_params, fill=3.0)
    aggregate(server, [payload_of(0, "full_params", a), payload_of(1, "full_params", b)])
    for t in server.global_params.named().values():
        assert (t.data == 2.0).all()


def test_aggregate_mixed_kinds_bucketed():
    cfg = make_cfg()
    server, _ = fresh_server(cfg)
    rng = np.random.default_rng(1)
    f1 = full_tensors(server.global_params, rng=rng)
    f2 = full_tensors(server.global_params, rng=rng)
    lora_shapes = {}
    for stage in ("s1", "s2"):
        for proj in ("wq", "wk", "wv"):
            lora_shapes[f"{stage}/{proj}/down"] = rng.normal(size=(cfg.d_v, cfg.lora_rank)).astype(np.float32)
            lora_shapes[f"{stage}/{proj}/up"] = rng.normal(size=(cfg.lora_rank, cfg.d_v)).astype(np.float32)
    aggregate(server, [
        payload_of(2, "lora_only", lora_shapes),
        payload_of(0, "full_params", f1),
        payload_of(1, "full_params", f2),
    ])
    for name, t in server.global_params.named().items():
        np.testing.assert_array_equal(t.data, (f1[name] + f2[name]) / np.float32(2))
    assert server.global_lora is not None
    for name, t in server.global_lora.named().items():
        np.testing.assert_array_equal(t.data, lora_shapes[name])


def test_aggregate_order_invariance_bitwise():
    rng = np.random.default_rng(2)
    server_a, _ = fresh_server()
    server_b, _ = fresh_server()
    payloads = [payload_of(i, "full_params", full_tensors(server_a.global_params, rng=rng))
                for i in range(5)]
    shuffled = [payloads[i] for i in [3, 0, 4, 2, 1]]
    aggregate(server_a, payloads)
    aggregate(server_b, shuffled)
    for name in server_a.global_params.named():
        assert (server_a.global_params.named()[name].data
                == server_b.global_params.named()[name].data).all()


def test_aggregate_shape_mismatch_names_tensor():
    server, _ = fresh_server()
    bad = full_tensors(server.global_params, fill=1.0)
    bad["query_bank"] = np.zeros((1, 1), dtype=np.float32)
    with pytest.raises(ShapeError, match="query_bank"):
        aggregate(server, [payload_of(0, "full_params", bad)])


def test_aggregate_empty_rejected():
    server, _ = fresh_server()
    with pytest.raises(ValueError, match="empty"):
        aggregate(server, [])


def test_pairwise_mean_matches_scalar_reference():
    rng = np.random.default_rng(3)
    for n in range(1, 9):
        arrays = [rng.normal(size=(3, 2)) for _ in range(n)]

        def scalar_pairwise(values):
            items = list(values)
            while len(items) > 1:
                merged = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
                if len(items) % 2:
                    merged.append(items[-1])
                items = merged
            return items[0] / n

        got = _pairwise_mean(arrays)
        want = np.empty_like(arrays[0])
        for i in range(3):
            for j in range(2):
                want[i, j] = scalar_pairwise([a[i, j] for a in arrays])
        assert (got == want).all()


# ---------------------------------------------------------------------------
# local training


def test_local_train_rejects_zero_iters(toy_cfg):
    setup = build_setup(toy_cfg)
    with pytest.raises(ValueError, match=">= 1"):
        client_local_train(setup.bundle, setup.server.global_params, None,
                           setup.clients[0], settings_for(toy_cfg, iters=0),
                           scoring_config(toy_cfg), toy_cfg.master_seed, 0)


def test_local_train_full_payload_and_counts(toy_cfg):
    setup = build_setup(toy_cfg)
    payload = client_local_train(setup.bundle, setup.server.global_params, None,
                                 setup.clients[0], settings_for(toy_cfg),
                                 scoring_config(toy_cfg), toy_cfg.master_seed, 0)
    assert payload.kind == "full_params"
    assert payload.param_count == param_count(setup.server.global_params, "full")
    assert np.isfinite(payload.train_loss)
    # server snapshot untouched by the client's local steps
    assert setup.server.global_params.checksum() == setup.server.global_params.checksum()


def test_low_initial_loss_triggers_lora_payload():
    # a single-class client with the consistency term off starts at ce == 0
    cfg = make_cfg(num_classes=4, classes_per_client=1, base_fraction=0.5, alpha=0.0)
    setup = build_setup(cfg)
    base_before = setup.server.global_params.checksum()
    payload = client_local_train(setup.bundle, setup.server.global_params, None,
                                 setup.clients[0], settings_for(cfg),
                                 scoring_config(cfg), cfg.master_seed, 0)
    assert payload.kind == "lora_only"
    assert payload.param_count == 12 * cfg.d_v * cfg.lora_rank
    assert setup.clients[0].lora_active
    assert setup.server.global_params.checksum() == base_before


def test_high_initial_loss_stays_full():
    cfg = make_cfg(alpha=10.0)
    setup = build_setup(cfg)
    payload = client_local_train(setup.bundle, setup.server.global_params, None,
                                 setup.clients[0], settings_for(cfg),
                                 scoring_config(cfg), cfg.master_seed, 0)
    assert payload.kind == "full_params"
    assert not setup.clients[0].lora_active


def test_fifty_iterations_halve_loss_on_separable_shard():
    cfg = make_cfg(local_iters=50, lr=0.08, alpha=0.5, batch_size=4,
                   noise_std=0.02, lora_threshold=0.0)  # threshold 0 keeps full mode
    setup = build_setup(cfg)
    record = setup.clients[0]
    scoring = scoring_config(cfg)
    shard = record.shard

    # replicate the client's first-batch draw to measure the starting loss
    rng = generator(cfg.master_seed, "train", 0, record.id)
    idx = np.sort(rng.choice(shard.images.shape[0], size=4, replace=False))
    seeds = [int(s) for s in rng.integers(0, 2**62, size=4)]
    snapshot = setup.server.global_params
    initial = batch_loss(setup.bundle, snapshot, None, [shard.images[i] for i in idx],
                         [int(shard.labels[i]) for i in idx], shard.class_names,
                         scoring, seeds).item()

    payload = client_local_train(setup.bundle, snapshot, None, record,
                                 settings_for(cfg, iters=50, lr=0.08),
                                 scoring, cfg.master_seed, 0)
    assert payload.train_loss <= 0.5 * initial, (initial, payload.train_loss)


def test_lora_threshold_zero_never_triggers():
    cfg = make_cfg(num_classes=4, classes_per_client=1, base_fraction=0.5,
                   alpha=0.0, lora_threshold=0.0)
    setup = build_setup(cfg)
    payload = client_local_train(setup.bundle, setup.server.global_params, None,
                                 setup.clients[0], settings_for(cfg, lora_threshold=0.0),
                                 scoring_config(cfg), cfg.master_seed, 0)
    assert payload.kind == "full_params"


# ---------------------------------------------------------------------------
# full runs


def test_run_federation_zero_rounds(toy_cfg):
    cfg = make_cfg(rounds=0)
    result = run_federation(cfg)
    assert result.history == []
    fresh = build_setup(cfg)
    assert result.server.global_params.checksum() == fresh.server.global_params.checksum()


def test_single_client_single_step_matches_manual_sgd():
    cfg = make_cfg(rounds=1, local_iters=1, num_classes=2, classes_per_client=2,
                   base_fraction=1.0, momentum=0.9, weight_decay=1e-5, alpha=0.5)
    result = run_federation(cfg)

    # manual step: same snapshot, same batch, plain SGD formulas
    setup = build_setup(cfg)
    record = setup.clients[0]
    shard = record.shard
    scoring = scoring_config(cfg)
    rng = generator(cfg.master_seed, "train", 0, record.id)
    idx = np.sort(rng.choice(shard.images.shape[0], size=4, replace=False))
    seeds = [int(s) for s in rng.integers(0, 2**62, size=4)]
    params = setup.server.global_params.copy()
    params.set_requires_grad(True)
    loss = batch_loss(setup.bundle, params, None, [shard.images[i] for i in idx],
                      [int(shard.labels[i]) for i in idx], shard.class_names,
                      scoring, seeds)
    grads = ad.grad_map(loss, params.named())
    for name, t in params.named().items():
        dt = t.data.dtype.type
        v = grads[name] + dt(cfg.weight_decay) * t.data  # velocity starts at zero
        t.data = t.data - dt(cfg.lr) * v

    for name, t in result.server.global_params.named().items():
        np.testing.assert_array_equal(t.data, params.named()[name].data, err_msg=name)


def test_run_determinism_bitwise(toy_cfg):
    r1 = run_federation(make_cfg())
    r2 = run_federation(make_cfg())
    assert r1.server.global_params.checksum() == r2.server.global_params.checksum()
    rows1 = [rec.csv_row() for rec in r1.history]
    rows2 = [rec.csv_row() for rec in r2.history]
    assert rows1 == rows2


def test_run_threads_do_not_change_results():
    r1 = run_federation(make_cfg(), workers=1)
    r2 = run_federation(make_cfg(), workers=3)
    assert r1.server.global_params.checksum() == r2.server.global_params.checksum()
    assert [rec.csv_row() for rec in r1.history] == [rec.csv_row() for rec in r2.history]


def test_frozen_bundle_conserved_across_run(toy_cfg):
    cfg = make_cfg(rounds=3)
    setup_probe = build_setup(cfg)
    before = setup_probe.bundle.checksum()
    result = run_federation(cfg)
    assert result.setup.bundle.checksum() == before


def test_history_and_ledger_shapes(toy_cfg):
    cfg = make_cfg(rounds=3)
    result = run_federation(cfg)
    assert len(result.history) == 3
    assert [rec.round for rec in result.history] == [0, 1, 2]
    total = result.ledger.cumulative_total()
    assert total == sum(e.param_count for e in result.ledger.entries)
    per_round = sum(result.ledger.round_total(r) for r in range(3))
    assert per_round == total
    assert result.history[-1].params_sent == result.ledger.round_total(2)


def test_ledger_report_contents(toy_cfg):
    cfg = make_cfg(rounds=1)
    result = run_federation(cfg)
    report = ledger_report(result.ledger)
    full = param_count(result.server.global_params, "full")
    lora = 12 * cfg.d_v * cfg.lora_rank
    assert f"{full / lora:.2f}x" in report
    assert "observed lora scalars sent: 0" in report


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, toy_cfg):
    cfg = make_cfg(rounds=1)
    result = run_federation(cfg)
    path = tmp_path / "final.fmvp"
    save_checkpoint(path, result.server, meta={"mean_train_loss": 1.25})
    template = init_promptformer(cfg.m, cfg.d_v, cfg.d_t, cfg.heads, seed=0,
                                 d_ff=cfg.d_ff or None, dtype=np.float32)
    params, lora, meta = load_checkpoint(path, template)
    assert params.checksum() == result.server.global_params.checksum()
    assert meta["round"] == 1.0
    assert meta["mean_train_loss"] == 1.25
    assert (lora is None) == (result.server.global_lora is None)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    cfg = make_cfg(rounds=1)
    result = run_federation(cfg)
    path = tmp_path / "final.fmvp"
    save_checkpoint(path, result.server)
    wrong = init_promptformer(cfg.m + 1, cfg.d_v, cfg.d_t, cfg.heads, seed=0)
    with pytest.raises(CheckpointMismatch, match="query_bank"):
        load_checkpoint(path, wrong)
