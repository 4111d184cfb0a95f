import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpsyau import autodiff as ad
from fedpsyau import federated as fed
from fedpsyau.convex import ArrayDataset, LogisticModel, heterogeneous_clients
from fedpsyau.errors import ContractError, FormatError, NumericError
from fedpsyau.nn import Module, Parameter
from fedpsyau.params import ParamSet, deserialize, serialize
from fedpsyau.training import OptimConfig, proximal_term


def scalar_set(v):
    return ParamSet([("w", np.array(float(v)))])


def random_set(rng, n_entries=None):
    n_entries = int(rng.integers(0, 6)) if n_entries is None else n_entries
    entries = []
    for k in range(n_entries):
        rank = int(rng.integers(0, 4))
        shape = tuple(int(d) for d in rng.integers(1, 5, size=rank))
        entries.append((f"layer{k}.w", rng.normal(size=shape) * 10.0 ** rng.integers(-300, 300)))
    return ParamSet(entries)


def same_shape_sets(rng, k):
    base = random_set(rng, 3)
    return [ParamSet([(n, rng.normal(size=v.shape)) for n, v in base.items()]) for _ in range(k)]


# ------------------------------------------------------------------ serialization


def test_roundtrip_is_bit_exact_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = random_set(rng)
        q = deserialize(serialize(p))
        assert q.names() == p.names() and q.bitwise_equal(p)


def test_roundtrip_keeps_special_values():
    p = ParamSet([("x", np.array([np.inf, -np.inf, -0.0, 5e-324]))])
    q = deserialize(serialize(p))
    assert serialize(q) == serialize(p)
    assert np.signbit(q["x"][2])


def test_empty_set_is_header_only():
    blob = serialize(ParamSet())
    assert len(blob) == 4 + 8 + 8 and blob[:4] == b"FPPS"
    assert len(deserialize(blob)) == 0


def test_layout_is_little_endian():
    blob = serialize(ParamSet([("ab", np.array([1.5]))]))
    assert blob[4:12] == (1).to_bytes(8, "little")
    assert blob[20:28] == (2).to_bytes(8, "little") and blob[28:30] == b"ab"
    assert blob[-8:] == np.array(1.5, dtype="<f8").tobytes()


@pytest.mark.parametrize("cut", [3, 19, 25, 40, -1])
def test_truncated_stream_is_format_error(cut):
    blob = serialize(ParamSet([("w", np.arange(4.0)), ("b", np.ones(2))]))
    with pytest.raises(FormatError) as exc:
        deserialize(blob[:cut])
    assert exc.value.offset >= 0


def test_bad_magic_and_version():
    blob = bytearray(serialize(scalar_set(1)))
    with pytest.raises(FormatError, match="magic"):
        deserialize(b"XXXX" + bytes(blob[4:]))
    blob[4] = 9
    with pytest.raises(FormatError, match="version"):
        deserialize(bytes(blob))


# ------------------------------------------------------------------ FedAvg


def test_fedavg_single_client_unchanged():
    p = random_set(np.random.default_rng(1), 3)
    assert fed.aggregate_fedavg([(p, 7)]).bitwise_equal(p)


def test_fedavg_weighted_scalars():
    out = fed.aggregate_fedavg([(scalar_set(0), 1), (scalar_set(4), 3)])
    assert out["w"] == 3.0


def test_fedavg_equal_sizes_is_mean():
    sets = same_shape_sets(np.random.default_rng(2), 3)
    out = fed.aggregate_fedavg([(s, 5) for s in sets])
    for name in out:
        np.testing.assert_allclose(out[name], np.mean([s[name] for s in sets], axis=0), rtol=0, atol=1e-12)


def test_fedavg_rejects_nonconforming():
    with pytest.raises(ContractError):
        fed.aggregate_fedavg([(scalar_set(0), 1), (ParamSet([("v", np.zeros(1))]), 1)])


# ------------------------------------------------------------------ P-FedProx


def test_pfedprox_hand_weights():
    w = fed.pfedprox_weights([10, 20, 30], 0, 0.9)
    np.testing.assert_allclose(w, [0.9, 0.04, 0.06], rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=2, max_size=8), st.floats(0, 1))
def test_pfedprox_weights_sum_to_one(sizes, theta):
    for i in range(len(sizes)):
        w = fed.pfedprox_weights(sizes, i, theta)
        assert abs(w.sum() - 1.0) <= 1e-12 and np.all(w >= 0)


def test_pfedprox_theta_one_is_identity():
    rng = np.random.default_rng(3)
    sets = same_shape_sets(rng, 4)
    out = fed.aggregate_pfedprox([(s, n) for s, n in zip(sets, [3, 9, 1, 4])], 1.0)
    assert all(o.bitwise_equal(s) for o, s in zip(out, sets))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 500), min_size=2, max_size=6))
def test_pfedprox_fedavg_equivalence(seed, sizes):
    sets = same_shape_sets(np.random.default_rng(seed), len(sizes))
    models = list(zip(sets, sizes))
    total = sum(sizes)
    outs = fed.aggregate_pfedprox(models, [n / total for n in sizes])
    ref = fed.aggregate_fedavg(models)
    for o in outs:
        assert o.allclose(ref, atol=1e-12)


def test_pfedprox_single_client_needs_theta_one():
    with pytest.raises(ContractError):
        fed.aggregate_pfedprox([(scalar_set(1), 3)], 0.9)
    assert fed.aggregate_pfedprox([(scalar_set(1), 3)], 1.0)[0]["w"] == 1.0


@pytest.mark.parametrize("strategy", fed.STRATEGIES)
def test_identical_models_are_conserved(strategy):
    rng = np.random.default_rng(4)
    p = ParamSet([("a", rng.normal(size=(3, 2)) * 1e3), ("b", rng.normal(size=5))])
    server = fed.Server(strategy, theta=0.9)
    sent = server.aggregate([fed.ClientUpdate(i, n, serialize(p)) for i, n in enumerate([7, 13, 2])])
    assert all(deserialize(b).bitwise_equal(p) for b in sent.values())


# ------------------------------------------------------------------ privacy boundary


def test_server_accepts_only_update_messages():
    server = fed.Server("fedavg")
    with pytest.raises(ContractError):
        server.aggregate([scalar_set(1)])
    with pytest.raises(ContractError):
        server.aggregate([fed.ClientUpdate(0, 1, scalar_set(1))])


def test_client_update_carries_only_id_count_and_bytes():
    fields = {f: t for f, t in fed.ClientUpdate.__annotations__.items()}
    assert fields == {"client_id": "int", "n_samples": "int", "payload": "bytes"}
    params = inspect.signature(fed.Server.aggregate).parameters
    assert list(params) == ["self", "updates"]


# ------------------------------------------------------------------ proximal objective


class Scalar(Module):
    def __init__(self, w):
        super().__init__()
        self.w = Parameter(np.array(float(w)))


def test_proximal_term_scalar_toy():
    model = Scalar(3.0)
    assert proximal_term(model, scalar_set(1.0), 0.1).item() == 0.2


def test_proximal_term_zero_at_anchor():
    model = Scalar(-1.25)
    assert proximal_term(model, scalar_set(-1.25), 0.5).item() == 0.0


def test_proximal_gradient_scalar_toy():
    model = Scalar(3.0)
    proximal_term(model, scalar_set(1.0), 0.1).backward()
    assert abs(model.w.grad - 0.2) <= 1e-15


# ------------------------------------------------------------------ round loop


def logistic_clients(parts, seed=0):
    out = []
    for i, d in enumerate(parts):
        k = len(d)
        cut = int(0.7 * k)
        model = LogisticModel(d.x.shape[1], d.n_classes, np.random.default_rng(seed))
        out.append(fed.ClientState(i, d.subset(range(cut)), d.subset(range(cut, k)), model))
    return out


def init_params(parts, seed=0):
    return LogisticModel(parts[0].x.shape[1], parts[0].n_classes, np.random.default_rng(seed)).state()


def fed_cfg(strategy, **kw):
    return fed.FedConfig(strategy=strategy, **({"rounds": 3, "optim": OptimConfig(0.05, 0.9, 16)} | kw))


def test_fedavg_one_client_matches_local_only():
    parts = heterogeneous_clients(1, seed=5)
    a = logistic_clients(parts)
    b = logistic_clients(parts)
    fed.run_rounds(a, fed_cfg("fedavg"), init_params(parts))
    fed.run_rounds(b, fed_cfg("local-only"), init_params(parts))
    assert a[0].params.bitwise_equal(b[0].params)
    assert [r.train_loss for r in a[0].history] == [r.train_loss for r in b[0].history]


def test_local_only_one_round_is_isolated_training():
    parts = heterogeneous_clients(3, seed=6)
    clients = logistic_clients(parts)
    cfg = fed_cfg("local-only", rounds=1, local_epochs=2)
    fed.run_rounds(clients, cfg, init_params(parts))
    for c, d in zip(clients, parts):
        solo = logistic_clients([d])[0]
        solo.client_id = c.client_id
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, c.client_id, 1]))
        p, _ = fed.local_train(solo, init_params(parts), 2, 0.0, cfg.optim, rng)
        assert p.bitwise_equal(c.params)


@pytest.mark.parametrize("strategy", fed.STRATEGIES)
def test_run_rounds_is_deterministic(strategy):
    parts = heterogeneous_clients(3, seed=7)
    runs = []
    for _ in range(2):
        clients = logistic_clients(parts)
        recs = fed.run_rounds(clients, fed_cfg(strategy), init_params(parts))
        runs.append(([(r.round, [(c.client_id, c.train_loss, c.metrics["uf1"]) for c in r.clients]) for r in recs],
                     [serialize(c.params) for c in clients]))
    assert runs[0] == runs[1]
    assert [r[0] for r in runs[0][0]] == [1, 2, 3]


def test_fedavg_clients_share_the_global_model():
    parts = heterogeneous_clients(4, seed=8)
    clients = logistic_clients(parts)
    fed.run_rounds(clients, fed_cfg("fedprox"), init_params(parts))
    assert all(c.params.bitwise_equal(clients[0].params) for c in clients)


def test_pfedprox_clients_stay_personal():
    parts = heterogeneous_clients(4, seed=8)
    clients = logistic_clients(parts)
    fed.run_rounds(clients, fed_cfg("pfedprox"), init_params(parts))
    assert not clients[0].params.allclose(clients[1].params, atol=1e-9)


def test_proximal_weight_by_strategy():
    assert fed_cfg("fedavg").proximal_weight == 0.0
    assert fed_cfg("local-only").proximal_weight == 0.0
    assert fed_cfg("fedprox").proximal_weight == 0.01
    assert fed_cfg("pfedprox", alpha4=0.3).proximal_weight == 0.3


def test_config_validation():
    with pytest.raises(ContractError):
        fed.FedConfig(strategy="scaffold")
    with pytest.raises(ContractError):
        fed.FedConfig(theta=1.5)
    with pytest.raises(ContractError):
        fed.FedConfig(rounds=0)


def test_empty_client_is_rejected():
    d = ArrayDataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(ContractError):
        fed.ClientState(0, d, None, LogisticModel(2, 2, np.random.default_rng(0)))


def test_numeric_failure_names_client_and_round():
    parts = heterogeneous_clients(2, seed=9)
    clients = logistic_clients(parts)
    clients[1].train.x[0, 0] = np.nan
    with pytest.raises(NumericError, match="client 1, round 1"):
        fed.run_rounds(clients, fed_cfg("fedavg"), init_params(parts))


def test_weighted_sum_accumulates_in_order():
    a, b = scalar_set(0.1), scalar_set(0.2)
    out = fed.aggregate_fedavg([(a, 1), (b, 1)])
    assert out["w"] == 0.5 * 0.1 + 0.5 * 0.2
    assert isinstance(ad.Tensor(out["w"]), ad.Tensor)
