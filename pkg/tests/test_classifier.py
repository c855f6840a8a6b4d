import socket
import struct
import threading

import numpy as np
import pytest

from distortbench import (
    ConstantClassifier,
    ImageTensor,
    InvalidArgumentError,
    ProtocolError,
    QueryCounter,
    RemoteClassifier,
    ToyLinearClassifier,
    TransportError,
    load_toy_weights,
    save_toy_weights,
    serve_toy,
    start_background,
    toy_linear_predict,
)
from distortbench import wire
from distortbench.classifier import check_normalization
from conftest import mid_image, random_image, scalar_softmax_probs


class TestToyLinearPredict:
    def test_zero_weights_uniform(self):
        probs = toy_linear_predict(np.zeros((3, 12)), np.zeros(3), mid_image((3, 2, 2)))
        assert np.allclose(probs, 1 / 3, atol=1e-15)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_dominant_bias(self):
        probs = toy_linear_predict(
            np.zeros((3, 12)), np.array([10.0, 0.0, 0.0]), mid_image((3, 2, 2))
        )
        assert probs[0] > 0.999

    def test_matches_scalar_loop(self, rng):
        weights = rng.normal(0, 1, size=(3, 48))
        bias = rng.normal(0, 1, size=3)
        img = random_image(rng, (3, 4, 4))
        got = toy_linear_predict(weights, bias, img)
        want = scalar_softmax_probs(weights, bias, img.data)
        assert np.allclose(got, want, atol=1e-9)

    def test_non_finite_weights_rejected(self):
        weights = np.zeros((3, 12))
        weights[0, 0] = np.inf
        with pytest.raises(InvalidArgumentError):
            toy_linear_predict(weights, np.zeros(3), mid_image((3, 2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            toy_linear_predict(np.zeros((3, 10)), np.zeros(3), mid_image((3, 2, 2)))


class TestClassifierBatching:
    def test_uniform_rows_for_zero_weights(self):
        clf = ToyLinearClassifier(np.zeros((4, 12)), np.zeros(4))
        probs = clf.predict([mid_image((3, 2, 2)), mid_image((3, 2, 2), 0.3)])
        assert probs.shape == (2, 4)
        assert np.allclose(probs, 0.25, atol=1e-7)

    def test_duplicate_images_identical_rows(self, rng):
        clf = ToyLinearClassifier(rng.normal(0, 1, (3, 12)), rng.normal(0, 1, 3))
        img = random_image(rng, (3, 2, 2))
        probs = clf.predict([img, img])
        assert np.array_equal(probs[0], probs[1])

    def test_weight_file_predictions_match_oracle(self, rng, tmp_path):
        weights = rng.normal(0, 1, size=(3, 48))
        bias = rng.normal(0, 1, size=3)
        path = tmp_path / "toy.dbtoy"
        save_toy_weights(path, weights, bias)
        clf = ToyLinearClassifier.from_file(path)
        img = random_image(rng, (3, 4, 4))
        got = clf.predict([img])[0]
        # the victim sees float32 inputs, so the oracle does too
        seen = img.data.astype(np.float32).astype(np.float64)
        want = scalar_softmax_probs(weights, bias, seen)
        assert np.allclose(got, want, atol=1e-6)

    def test_query_counter_both_conventions(self, rng):
        clf = ToyLinearClassifier(np.zeros((3, 12)), np.zeros(3), max_batch=4)
        images = [random_image(rng, (3, 2, 2)) for _ in range(10)]
        clf.predict(images)
        evals, batches = clf.counter.snapshot()
        assert evals == 10
        assert batches == 3  # ceil(10 / 4)

    def test_empty_batch_rejected(self):
        clf = ToyLinearClassifier(np.zeros((3, 12)), np.zeros(3))
        with pytest.raises(InvalidArgumentError):
            clf.predict([])

    def test_mixed_shapes_rejected(self, rng):
        clf = ToyLinearClassifier(np.zeros((3, 12)), np.zeros(3))
        with pytest.raises(InvalidArgumentError):
            clf.predict([mid_image((3, 2, 2)), mid_image((3, 4, 4))])

    def test_counter_thread_safety(self):
        counter = QueryCounter()

        def hammer():
            for _ in range(1000):
                counter.record(3)

        threads = [threading.Thread(target=hammer) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert counter.snapshot() == (24_000, 8_000)


class TestToyWeightFile:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        weights = rng.normal(0, 1, size=(5, 27))
        bias = rng.normal(0, 1, size=5)
        path = tmp_path / "w.dbtoy"
        save_toy_weights(path, weights, bias)
        w2, b2 = load_toy_weights(path)
        assert np.array_equal(weights, w2)
        assert np.array_equal(bias, b2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dbtoy"
        path.write_bytes(b"NOTTOY" + b"\x00" * 32)
        with pytest.raises(InvalidArgumentError):
            load_toy_weights(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.dbtoy"
        path.write_bytes(struct.pack("<6sII", b"DBTOY1", 3, 10) + b"\x00" * 8)
        with pytest.raises(InvalidArgumentError):
            load_toy_weights(path)


class TestWireCodec:
    def test_request_round_trip_float32_exact(self, rng):
        batch = rng.uniform(0, 1, size=(2, 3, 4, 4)).astype(np.float32)
        frame = wire.encode_predict_request(batch)
        decoded = wire.decode_predict_request(frame)
        assert decoded.dtype == np.float32
        assert np.array_equal(decoded, batch)

    def test_response_round_trip(self, rng):
        probs = rng.dirichlet(np.ones(5), size=3)
        frame = wire.encode_predict_response(probs)
        decoded = wire.decode_predict_response(frame)
        assert np.array_equal(decoded, probs.astype(np.float32).astype(np.float64))

    def test_empty_batch_rejected_on_encode(self):
        with pytest.raises(ProtocolError):
            wire.encode_predict_request(np.zeros((0,)))

    def test_count_mismatch_detected(self):
        # declared batch of 2 but payload carries a single image
        payload = np.zeros((1, 1, 2, 2), dtype="<f4").tobytes()
        frame = wire.MAGIC + struct.pack("<BIIII", 1, 2, 1, 2, 2) + payload
        with pytest.raises(ProtocolError):
            wire.decode_predict_request(frame)

    def test_bad_magic_rejected(self):
        frame = b"XXXX" + struct.pack("<BII", 2, 1, 3) + b"\x00" * 12
        with pytest.raises(ProtocolError):
            wire.decode_predict_response(frame)

    def test_unexpected_type_rejected(self):
        frame = wire.encode_predict_request(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ProtocolError):
            wire.decode_predict_response(frame)

    def test_error_frame_round_trip(self):
        frame = wire.encode_error("model exploded")
        assert wire.decode_error(frame) == "model exploded"

    def test_error_frame_raises_on_response_decode(self):
        frame = wire.encode_error("bad batch")
        with pytest.raises(ProtocolError, match="bad batch"):
            wire.decode_predict_response(frame)

    def test_truncated_frame_rejected(self):
        frame = wire.encode_predict_request(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ProtocolError):
            wire.decode_predict_request(frame[:-3])


class TestNormalizationPolicy:
    def test_exact_rows_pass_through(self):
        probs = np.array([[0.25, 0.75]])
        out = check_normalization(probs)
        assert np.array_equal(out, probs)

    def test_small_drift_renormalized_with_warning(self, caplog):
        probs = np.array([[0.2501, 0.7501]])  # off by 2e-4
        with caplog.at_level("WARNING"):
            out = check_normalization(probs)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)
        assert any("renormalizing" in r.message for r in caplog.records)

    def test_large_drift_rejected(self):
        with pytest.raises(ProtocolError):
            check_normalization(np.array([[0.3, 0.75]]))  # off by 5e-2

    def test_negative_probability_rejected(self):
        with pytest.raises(ProtocolError):
            check_normalization(np.array([[-0.01, 1.01]]))

    def test_non_finite_rejected(self):
        with pytest.raises(ProtocolError):
            check_normalization(np.array([[np.nan, 1.0]]))


class TestRemoteLoopback:
    @pytest.fixture
    def toy_server(self, rng, tmp_path):
        weights = rng.normal(0, 1, size=(3, 48))
        bias = rng.normal(0, 1, size=3)
        path = tmp_path / "victim.dbtoy"
        save_toy_weights(path, weights, bias)
        server = serve_toy(path)
        start_background(server)
        yield weights, bias, server
        server.shutdown()
        server.server_close()

    def test_remote_matches_in_process_bit_exact(self, rng, toy_server):
        weights, bias, server = toy_server
        local = ToyLinearClassifier(weights, bias)
        remote = RemoteClassifier("127.0.0.1", server.port)
        images = [random_image(rng, (3, 4, 4)) for _ in range(5)]
        local_probs = local.predict(images)
        remote_probs = remote.predict(images)
        assert np.array_equal(local_probs, remote_probs)
        remote.close()

    def test_remote_counts_queries(self, rng, toy_server):
        _, _, server = toy_server
        remote = RemoteClassifier("127.0.0.1", server.port, max_batch=2)
        images = [random_image(rng, (3, 4, 4)) for _ in range(5)]
        remote.predict(images)
        assert remote.counter.snapshot() == (5, 3)
        remote.close()

    def test_server_reports_shape_mismatch_as_error_frame(self, toy_server):
        _, _, server = toy_server
        remote = RemoteClassifier("127.0.0.1", server.port)
        with pytest.raises(ProtocolError, match="input size"):
            remote.predict([mid_image((1, 2, 2))])
        remote.close()

    def test_connection_survives_error_frame(self, rng, toy_server):
        _, _, server = toy_server
        remote = RemoteClassifier("127.0.0.1", server.port)
        with pytest.raises(ProtocolError):
            remote.predict([mid_image((1, 2, 2))])
        probs = remote.predict([random_image(rng, (3, 4, 4))])
        assert probs.shape == (1, 3)
        remote.close()

    def test_dead_endpoint_raises_transport_error(self):
        # grab a port and close it so nothing is listening
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        remote = RemoteClassifier("127.0.0.1", port, retries=2, timeout=0.5)
        with pytest.raises(TransportError):
            remote.predict([mid_image((1, 2, 2))])
