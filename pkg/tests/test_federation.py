import hashlib
import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from pfdm._rng import stream
from pfdm.denoiser import GaussianMixtureSpec, OracleDenoiser, TrainingConfig
from pfdm.diffusion import SampleBatch, make_linear_schedule, sample_ddpm
from pfdm.federation import (
    ClientState,
    FederationError,
    FileTransport,
    InProcessTransport,
    NoisyDatasetMessage,
    ProtocolError,
    ServerState,
    SocketTransport,
    client_noisify,
    client_train_local,
    pfdm_sample,
    run_federation,
    server_train_global,
)

SCHED = make_linear_schedule(1000, 1e-4, 0.02)
FP = SCHED.fingerprint()

TINY = TrainingConfig(learning_rate=1e-3, batch_size=16, n_steps=30, optimizer="adam", hidden=(16,), time_dim=8,
                      seed=3)


def client(cid, n=40, d=3, t0=100, seed=0, labels=True, schedule=SCHED, value=None):
    rng = np.random.default_rng(100 + cid)
    x = rng.normal(size=(n, d)) if value is None else np.full((n, d), value)
    y = rng.integers(0, 2, n) if labels else None
    return ClientState(cid, SampleBatch(x, (d,), y), t0, schedule, seed)


class TestWireFormat:
    def test_bytes_match_hand_layout(self):
        samples = np.array([[1.0, -2.5], [0.25, 3.0]], dtype=np.float32)
        msg = NoisyDatasetMessage(7, 400, samples, np.array([3, 9]), FP)
        expected = (b"PFDM" + struct.pack("<H", 1) + struct.pack("<I", 7) + struct.pack("<I", 400)
                    + struct.pack("<I", 2) + struct.pack("<I", 2) + FP + b"\x01"
                    + struct.pack("<4f", 1.0, -2.5, 0.25, 3.0) + struct.pack("<2H", 3, 9))
        assert msg.to_bytes() == expected

    def test_unlabelled_layout(self):
        msg = NoisyDatasetMessage(1, 5, np.zeros((3, 4)), None, FP)
        raw = msg.to_bytes()
        assert len(raw) == 4 + 2 + 4 * 4 + 32 + 1 + 3 * 4 * 4
        assert raw[54] == 0

    def test_round_trip(self):
        msg = NoisyDatasetMessage(2, 100, np.random.default_rng(0).normal(size=(5, 6)), np.arange(5), FP)
        back = NoisyDatasetMessage.from_bytes(msg.to_bytes())
        assert back.client_id == 2 and back.t0 == 100 and back.fingerprint == FP
        np.testing.assert_array_equal(back.samples, msg.samples)
        np.testing.assert_array_equal(back.labels, msg.labels)
        assert back.to_bytes() == msg.to_bytes()

    def test_bad_magic(self):
        raw = bytearray(NoisyDatasetMessage(0, 1, np.zeros((1, 1)), None, FP).to_bytes())
        raw[:4] = b"XXXX"
        with pytest.raises(ProtocolError, match="magic"):
            NoisyDatasetMessage.from_bytes(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(NoisyDatasetMessage(0, 1, np.zeros((1, 1)), None, FP).to_bytes())
        raw[4:6] = struct.pack("<H", 99)
        with pytest.raises(ProtocolError, match="version"):
            NoisyDatasetMessage.from_bytes(bytes(raw))

    @pytest.mark.parametrize("cut", [10, 1])
    def test_truncated(self, cut):
        raw = NoisyDatasetMessage(0, 1, np.zeros((4, 2)), np.arange(4), FP).to_bytes()
        with pytest.raises(ProtocolError):
            NoisyDatasetMessage.from_bytes(raw[:-cut] if cut > 1 else raw[:cut])

    def test_field_validation(self):
        with pytest.raises(ValueError):
            NoisyDatasetMessage(0, 1, np.zeros((2, 2)), np.arange(3), FP)
        with pytest.raises(ValueError):
            NoisyDatasetMessage(0, 1, np.zeros((2, 2)), None, b"short")

    @settings(max_examples=40, deadline=None)
    @given(
        samples=hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                           elements=st.floats(-1e6, 1e6, width=32)),
        labelled=st.booleans(),
        cid=st.integers(0, 2**32 - 1),
        t0=st.integers(1, 2**32 - 1),
    )
    def test_reconstruction_property(self, samples, labelled, cid, t0):
        labels = np.arange(samples.shape[0]) % 65536 if labelled else None
        raw = NoisyDatasetMessage(cid, t0, samples, labels, FP).to_bytes()
        back = NoisyDatasetMessage.from_bytes(raw)
        assert back.samples.tobytes() == samples.tobytes()
        assert back.to_bytes() == raw


class TestTransports:
    def msg(self, cid=0):
        return NoisyDatasetMessage(cid, 10, np.ones((2, 2)), None, FP)

    def test_whitelist(self):
        t = InProcessTransport()
        for bad in (np.zeros((2, 2)), {"samples": np.zeros(2)}, b"raw bytes", object()):
            with pytest.raises(ProtocolError):
                t.send(bad)
        assert t.audit_log == []

    def test_subclass_refused(self):
        class Sneaky(NoisyDatasetMessage):
            pass

        with pytest.raises(ProtocolError):
            InProcessTransport().send(Sneaky(0, 1, np.zeros((1, 1)), None, FP))

    def test_audit_hash(self):
        t = InProcessTransport()
        m = self.msg(4)
        t.send(m)
        entry = t.audit_log[0]
        assert entry.kind == "NoisyDatasetMessage" and entry.client_id == 4
        assert entry.sha256 == hashlib.sha256(m.to_bytes()).hexdigest()
        assert entry.n_bytes == len(m.to_bytes())
        assert len(t.receive_all()) == 1 and t.receive_all() == []

    def test_file_transport(self, tmp_path):
        t = FileTransport(tmp_path)
        t.send(self.msg(1))
        t.send(self.msg(0))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["client_0.pfdm", "client_1.pfdm"]
        got = t.receive_all()
        assert [m.client_id for m in got] == [0, 1]

    def test_socket_transport(self):
        a, b = socket.socketpair()
        try:
            t = SocketTransport(send_sock=a, recv_sock=b)
            t.send(self.msg(0))
            t.send(self.msg(1))
            got = t.receive(2)
            assert [m.client_id for m in got] == [0, 1]
            np.testing.assert_array_equal(got[0].samples, np.ones((2, 2)))
        finally:
            a.close()
            b.close()


class TestClient:
    def test_rejects_over_release(self):
        c = client(0, n=10)
        with pytest.raises(ProtocolError):
            client_noisify(c, 11)

    def test_release_once(self):
        c = client(0, n=10)
        m1 = client_noisify(c, 6)
        assert m1.count == 6 and len(c.released) == 6
        with pytest.raises(ProtocolError):
            client_noisify(c, 5)
        m2 = client_noisify(c)
        assert m2.count == 4 and len(c.released) == 10
        with pytest.raises(ProtocolError):
            client_noisify(c, 1)

    def test_releases_are_permuted(self):
        c = client(0, n=200, d=1)
        c.data = SampleBatch(np.arange(200.0)[:, None], (1,), None)
        c.t0 = 1
        msg = client_noisify(c)
        order = np.argsort(msg.samples[:, 0])
        assert not np.array_equal(order, np.arange(200))
        assert np.all(np.abs(np.sort(msg.samples[:, 0]) / np.sqrt(SCHED.alpha_bar(1)) - np.arange(200)) < 0.1)

    def test_residual_is_standard_normal(self):
        c = client(0, n=2000, d=4, t0=250, value=0.7)
        msg = client_noisify(c)
        ab = SCHED.alpha_bar(250)
        resid = (msg.samples.astype(float) - np.sqrt(ab) * 0.7) / np.sqrt(1 - ab)
        assert stats.kstest(resid.ravel(), "norm").pvalue > 1e-3
        assert abs(resid.mean()) < 0.05 and abs(resid.var() - 1) < 0.05

    def test_distortion_grows_with_t0(self):
        dist = []
        for t0 in (100, 400):
            c = client(0, n=3000, d=2, t0=t0, value=1.0)
            dist.append(np.mean((client_noisify(c).samples - 1.0) ** 2))
        assert dist[1] > dist[0]

    def test_labels_travel_with_samples(self):
        c = client(0, n=50, t0=1)
        c.data = SampleBatch(np.repeat(np.arange(50.0)[:, None], 3, axis=1), (3,), np.arange(50) % 7)
        msg = client_noisify(c)
        recovered = np.rint(msg.samples[:, 0] / np.sqrt(SCHED.alpha_bar(1))).astype(int)
        np.testing.assert_array_equal(msg.labels, recovered % 7)

    def test_local_training_only_sees_t_leq_t0(self):
        c = client_train_local(client(0, t0=1), TINY)
        assert all(np.all(t == 1) for t in c.training.timesteps)
        c = client_train_local(client(0, t0=20), TINY)
        ts = np.concatenate(c.training.timesteps)
        assert ts.min() >= 1 and ts.max() <= 20
        assert c.denoiser.metadata["t_max"] == 20

    def test_oracle_path(self):
        oracle = OracleDenoiser(GaussianMixtureSpec.single([0.0, 0.0, 0.0], 1.0), SCHED)
        c = client_train_local(client(0), oracle=oracle)
        assert c.denoiser is oracle and c.training is None


class TestServer:
    def test_fingerprint_mismatch(self):
        server = ServerState(SCHED, (3,))
        other = make_linear_schedule(1000, 1e-4, 0.03)
        with pytest.raises(ProtocolError):
            server.receive(NoisyDatasetMessage(0, 10, np.zeros((1, 3)), None, other.fingerprint()))

    def test_duplicate_client(self):
        server = ServerState(SCHED, (3,))
        server.receive(NoisyDatasetMessage(0, 10, np.zeros((1, 3)), None, FP))
        with pytest.raises(ProtocolError):
            server.receive(NoisyDatasetMessage(0, 10, np.zeros((1, 3)), None, FP))

    def test_combines_all_releases(self):
        server = ServerState(SCHED, (3,))
        for cid in (1, 0):
            server.receive(client_noisify(client(cid, n=50)))
        combined = server.combined()
        assert len(combined) == 100
        assert combined.labels.shape == (100,)

    def test_mixed_labels_rejected(self):
        server = ServerState(SCHED, (3,))
        server.receive(client_noisify(client(0, n=5)))
        server.receive(client_noisify(client(1, n=5, labels=False)))
        with pytest.raises(ProtocolError):
            server.combined()

    def test_global_loss_decreases(self):
        server = ServerState(SCHED, (3,))
        for cid in (0, 1):
            server.receive(client_noisify(client(cid, n=200)))
        cfg = TrainingConfig(learning_rate=3e-3, batch_size=64, n_steps=300, optimizer="adam", hidden=(32,),
                             time_dim=8, seed=0)
        server = server_train_global(server, cfg)
        means = server.training.epoch_means()
        assert means[-10:].mean() < means[:10].mean()
        assert server.denoiser.metadata["role"] == "global"


@pytest.fixture(scope="module")
def models():
    s = make_linear_schedule(50, 1e-3, 0.2)
    glob = OracleDenoiser(GaussianMixtureSpec.single([0.0, 0.0], 1.0), s)
    local = OracleDenoiser(GaussianMixtureSpec.single([2.0, -1.0], 0.25), s)
    return s, glob, local


class TestSampling:
    def test_t0_zero_is_global_sample(self, models):
        s, glob, local = models
        out = pfdm_sample(glob, local, s, 0, 20, seed=5)
        ref = sample_ddpm(glob, s, None, 20, seed=stream(5, "global"))
        np.testing.assert_array_equal(out.data, ref.data)

    def test_trajectory_layout(self, models):
        s, glob, local = models
        traj = []
        out = pfdm_sample(glob, local, s, 12, 8, seed=1, trajectory=traj)
        assert traj[0][0] == "global" and traj[0][1] == 0
        personal = traj[1:]
        assert len(personal) == 12
        assert [t for _, t, _ in personal] == list(range(11, -1, -1))
        np.testing.assert_array_equal(personal[-1][2], out.data)

    def test_deterministic(self, models):
        s, glob, local = models
        a = pfdm_sample(glob, local, s, 10, 16, seed=9)
        b = pfdm_sample(glob, local, s, 10, 16, seed=9)
        np.testing.assert_array_equal(a.data, b.data)

    def test_bad_t0(self, models):
        s, glob, local = models
        with pytest.raises(ValueError):
            pfdm_sample(glob, local, s, 51, 2)


class TestRunFederation:
    def test_single_client(self):
        res = run_federation([client(0, n=30)], TINY, TINY)
        assert len(res.audit_log) == 1
        assert len(res.server.combined()) == 30

    def test_failure_isolation(self):
        cfg = TrainingConfig(**{**TINY.to_dict(), "conditional": True})
        transport = InProcessTransport()
        clients = [client(0), client(1, labels=False), client(2)]
        with pytest.raises(FederationError) as info:
            run_federation(clients, cfg, cfg, transport=transport, n_labels=2)
        assert set(info.value.failures) == {1}
        assert [e.client_id for e in transport.audit_log] == [0, 2]

    def test_mismatched_schedules(self):
        other = make_linear_schedule(1000, 1e-4, 0.03)
        with pytest.raises(ProtocolError):
            run_federation([client(0), client(1, schedule=other)], TINY, TINY)

    def test_partial_release(self):
        res = run_federation([client(0, n=30), client(1, n=30)], TINY, TINY, n_release={0: 10})
        assert len(res.server.messages[0].samples) == 10
        assert len(res.server.messages[1].samples) == 30

    def test_checkpoints_byte_identical(self):
        def once():
            return run_federation([client(0), client(1)], TINY, TINY).global_checkpoint()

        assert once() == once()

    def test_locals_retrievable(self):
        res = run_federation([client(0), client(1)], TINY, TINY)
        assert res.local(1) is res.clients[1].denoiser
        with pytest.raises(KeyError):
            res.local(5)

    def test_digits_smoke(self):
        from sklearn.datasets import load_digits

        digits = load_digits()
        x = digits.data[:120] / 16.0
        y = digits.target[:120]
        cfg = TrainingConfig(learning_rate=1e-3, batch_size=32, n_steps=20, optimizer="adam", hidden=(32,),
                             time_dim=8, conditional=True)
        clients = [ClientState(i, SampleBatch(x[i::2], (1, 8, 8), y[i::2]), 100, SCHED, seed=i) for i in (0, 1)]
        res = run_federation(clients, cfg, cfg, n_labels=10)
        s = make_linear_schedule(1000, 1e-4, 0.02)
        out = pfdm_sample(res.global_denoiser, res.local(0), s, 100, 4, label=np.arange(4), seed=0)
        assert out.shape == (1, 8, 8) and out.data.shape == (4, 64)
        assert np.all(np.isfinite(out.data))
