import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from clickpredict import pipeline
from clickpredict.calibration import MatrixScaling
from clickpredict.config import Config
from clickpredict.examples import make_instance
from clickpredict.model import TrainedModel, init_params
from clickpredict.serving import (ArchiveUnavailableError, InMemoryEventStore, LoadError,
                                  NotFoundError, PredictionLog, PredictionLogRecord, PredictionService,
                                  archive_file_sink, deserialize_model, make_server, model_filters,
                                  predict_instance, read_prediction_log, serialize_model)
from clickpredict.sessions import preprocess_event, read_archive

from conftest import T0, make_event, raw_event
from oracles import with_random_biases


def random_model(version="v0001", family="purchase", seed=0, calibrated=False):
    cfg = Config()
    enc = pipeline.encoder_config(cfg)
    mcfg = pipeline.base_model_config(cfg, enc)
    rng = np.random.default_rng(seed)
    params = with_random_biases(init_params(mcfg, rng), rng, 0.3)
    cal = MatrixScaling(np.array([[1.2, 0.1], [-0.2, 0.8]]), np.array([0.1, -0.3])) if calibrated else None
    return TrainedModel(params, mcfg, enc, cal, {"val_auc": 0.8}, version, family,
                        instance_config=pipeline.instance_config(cfg))


class Clock:
    def __init__(self, now=T0):
        self.now = now

    def __call__(self):
        return self.now


@pytest.fixture
def service():
    clock = Clock(T0 + 60_000)
    store = InMemoryEventStore(allowed_types={"page", "click", "scroll"}, clock=clock)
    svc = PredictionService(store, clock=clock)
    svc.registry.load_model(serialize_model(random_model()))
    return svc


class TestEventStore:
    def test_sorted_and_bounded(self):
        store = InMemoryEventStore(max_events_per_user=5, clock=Clock(T0 + 10**6))
        for ts in [50, 10, 30, 20, 40, 60, 0]:
            store.append(make_event(ts * 1000))
        got = [e.timestamp - T0 for e in store.recent("a1")]
        assert got == [20_000, 30_000, 40_000, 50_000, 60_000]

    def test_ttl_expiry(self):
        clock = Clock(T0)
        store = InMemoryEventStore(ttl_seconds=100, clock=clock)
        store.append(make_event(0))
        assert len(store.recent("a1")) == 1
        clock.now = T0 + 100_001
        assert store.recent("a1") == []

    def test_limit_and_types(self):
        store = InMemoryEventStore(clock=Clock(T0 + 10**6))
        for i, kind in enumerate(["page", "click", "page", "click"]):
            store.append(make_event(i * 1000, kind=kind))
        assert len(store.recent("a1", limit=2)) == 2
        assert [e.event_type for e in store.recent("a1", allowed_types=["click"])] == ["click", "click"]

    def test_disallowed_type_not_stored(self):
        store = InMemoryEventStore(allowed_types={"page"}, clock=Clock(T0))
        assert not store.append(make_event(0, kind="log"))
        assert store.recent("a1") == []

    def test_concurrent_appends(self):
        store = InMemoryEventStore(max_events_per_user=10_000, clock=Clock(T0 + 10**6))

        def work(k):
            for i in range(200):
                store.append(make_event(i * 7 + k, anon="u"))

        threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        ts = [e.timestamp for e in store.recent("u")]
        assert len(ts) == 800 and ts == sorted(ts)


class TestIngest:
    def test_happy_path(self, tmp_path):
        clock = Clock(T0 + 60_000)
        path = tmp_path / "archive.jsonl"
        svc = PredictionService(InMemoryEventStore(clock=clock), archive_sink=archive_file_sink(path))
        ack = svc.ingest([raw_event(i * 1000) for i in range(3)])
        assert ack["accepted"] == 3 and ack["rejected"] == 0
        assert len(svc.store.recent("a1")) == 3
        assert len(list(read_archive(path))) == 3

    def test_malformed_counted(self, service):
        ack = service.ingest([raw_event(0), {"timestamp": "x"}, raw_event(1000)])
        assert ack["accepted"] == 2 and ack["rejected"] == 1

    def test_disallowed_type_archived_not_stored(self):
        archived = []
        svc = PredictionService(InMemoryEventStore(allowed_types={"page"}, clock=Clock(T0 + 10**6)),
                                archive_sink=archived.extend)
        svc.ingest([raw_event(0, kind="log")])
        assert len(archived) == 1 and svc.store.recent("a1") == []

    def test_archive_unavailable(self):
        def broken(events):
            raise OSError("disk full")

        svc = PredictionService(InMemoryEventStore(clock=Clock(T0)), archive_sink=broken)
        with pytest.raises(ArchiveUnavailableError) as info:
            svc.ingest([raw_event(0)])
        assert info.value.retryable


class TestPredict:
    def test_three_events_are_front_padded(self, service):
        service.ingest([raw_event(i * 1000, kind=k) for i, k in enumerate(["page", "click", "page"])])
        res = service.handle_predict("purchase", "a1")
        model = service.registry.active("purchase")
        events = [preprocess_event(raw_event(i * 1000, kind=k)) for i, k in enumerate(["page", "click", "page"])]
        inst = make_instance(events, model_filters(model), 40)
        assert sum(e.is_blank for e in inst.events) == 37
        assert res["value"] == predict_instance(model, inst)
        assert 0 <= res["value"] <= 1 and not res["cold_start"]

    def test_repeatable(self, service):
        service.ingest([raw_event(0), raw_event(5000, kind="click")])
        a = service.handle_predict("purchase", "a1")
        b = service.handle_predict("purchase", "a1")
        assert a == b
        first, second = service.log.records
        assert first.to_dict() == second.to_dict()

    def test_cold_start(self, service):
        res = service.handle_predict("purchase", "nobody")
        model = service.registry.active("purchase")
        assert res["cold_start"]
        assert res["value"] == predict_instance(model, make_instance([], [], 40))
        assert service.log.records[-1].cold_start

    def test_unknown_family(self, service):
        with pytest.raises(NotFoundError):
            service.handle_predict("nope", "a1")

    def test_one_log_record_per_prediction(self, service):
        service.ingest([raw_event(0)])
        for _ in range(5):
            service.handle_predict("purchase", "a1")
        assert len(service.log.records) == 5
        rec = service.log.records[0]
        assert rec.version_id == "v0001" and len(rec.event_ids) == 1 and not rec.calibrated

    def test_independent_of_call_order(self):
        model = random_model()
        rng = np.random.default_rng(1)
        instances = [make_instance([make_event(int(t)) for t in np.sort(rng.integers(0, 10**6, k))], [], 40)
                     for k in (1, 5, 40)]
        forward_order = [predict_instance(model, inst).hex() for inst in instances]
        reverse_order = [predict_instance(model, inst).hex() for inst in instances[::-1]][::-1]
        assert forward_order == reverse_order


class TestModelManagement:
    def test_load_switches_version(self, service):
        service.registry.load_model(serialize_model(random_model("v0002", seed=1)))
        assert service.handle_predict("purchase", "x")["version_id"] == "v0002"
        assert service.log.records[-1].version_id == "v0002"

    def test_activate_previous(self, service):
        service.registry.load_model(serialize_model(random_model("v0002", seed=1)))
        service.registry.activate_version("purchase", "v0001")
        assert service.handle_predict("purchase", "x")["version_id"] == "v0001"
        with pytest.raises(NotFoundError):
            service.registry.activate_version("purchase", "v0099")

    def test_corrupted_byte_keeps_previous(self, service):
        blob = bytearray(serialize_model(random_model("v0002", seed=1)))
        blob[100] ^= 0x01
        with pytest.raises(LoadError):
            service.registry.load_model(bytes(blob))
        assert service.registry.active("purchase").version_id == "v0001"
        assert service.registry.versions("purchase") == ["v0001"]

    @pytest.mark.parametrize("blob", [b"", b"CPFM", b"XXXX" + bytes(100)])
    def test_garbage(self, blob):
        with pytest.raises(LoadError):
            deserialize_model(blob)

    @pytest.mark.parametrize("calibrated,n", [(False, 200), (True, 1000)])
    def test_round_trip(self, calibrated, n):
        model = random_model(calibrated=calibrated)
        back = deserialize_model(serialize_model(model))
        assert (back.calibration is None) == (not calibrated)
        rng = np.random.default_rng(2)
        kinds = ["page", "click", "scroll"]
        for _ in range(n):
            k = int(rng.integers(0, 41))
            ts = np.sort(rng.integers(0, 10**7, k))
            evs = [make_event(int(t), kind=kinds[int(rng.integers(3))], path=f"/p{int(rng.integers(50))}")
                   for t in ts]
            inst = make_instance(evs, [], 40)
            assert predict_instance(back, inst).hex() == predict_instance(model, inst).hex()


class TestPredictionLog:
    def record(self, i):
        return PredictionLogRecord(T0 + i, "a1", "purchase", "v0001", [f"e{i}"], 0.25, False)

    def test_rotation_keeps_all_records(self, tmp_path):
        path = tmp_path / "pred.jsonl"
        log = PredictionLog(path, max_bytes=600)
        for i in range(20):
            log.append(self.record(i))
        assert (tmp_path / "pred.jsonl.1").exists()
        back = read_prediction_log(path)
        assert [r.wall_timestamp for r in back] == [T0 + i for i in range(20)]

    def test_in_memory(self):
        log = PredictionLog()
        log.append(self.record(0))
        assert log.records == [self.record(0)]


def http(method, url, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


class TestHTTP:
    @pytest.fixture
    def base_url(self, service):
        server = make_server(service, port=0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        yield f"http://127.0.0.1:{server.server_address[1]}"
        server.shutdown()
        server.server_close()

    def test_endpoints(self, base_url, service):
        status, ack = http("POST", f"{base_url}/v1/events", [raw_event(0), raw_event(1000, kind="click")])
        assert status == 200 and ack["accepted"] == 2
        status, res = http("GET", f"{base_url}/v1/predict/purchase/a1")
        assert status == 200 and res["versionId"] == "v0001" and not res["coldStart"]
        assert res["value"] == service.log.records[-1].value
        status, info = http("GET", f"{base_url}/v1/models/purchase")
        assert status == 200 and info["versions"] == ["v0001"]

    def test_activate_and_errors(self, base_url, service):
        service.registry.load_model(serialize_model(random_model("v0002", seed=1)))
        status, res = http("POST", f"{base_url}/v1/models/purchase/activate", {"versionId": "v0001"})
        assert status == 200 and res["versionId"] == "v0001"
        assert http("POST", f"{base_url}/v1/models/purchase/activate", {"versionId": "zzz"})[0] == 404
        assert http("GET", f"{base_url}/v1/predict/nope/a1")[0] == 404
        assert http("POST", f"{base_url}/v1/events", {"not": "a list"})[0] == 400
        assert http("GET", f"{base_url}/elsewhere")[0] == 404
