import json
import urllib.request

import numpy as np
import pytest

from phtrain.partition import DatasetShard
from phtrain.preprocess import RawImage, decode_png
from phtrain.resource_api import dispatch, serve
from phtrain.station import StationStore, ingest


@pytest.fixture
def store():
    s = StationStore()
    images = {"1": RawImage(np.zeros((2, 2, 3), np.uint8)), "2": RawImage(np.ones((2, 2, 3), np.uint8))}
    ingest(s, DatasetShard("station-0", ("1", "2")), images, {"1": 0, "2": 1}, experiment="demo")
    return s


def body(resp):
    return json.loads(resp[2])


def test_read_resources(store):
    status, ctype, _ = resp = dispatch(store, "GET", "/Patient/1")
    assert status == 200 and ctype == "application/json"
    assert body(resp)["media_refs"] == ["media-1"]
    assert body(dispatch(store, "GET", "/Media/media-2"))["label"] == "NV"
    assert body(dispatch(store, "GET", "/ImagingStudy/study-demo"))["patient_refs"] == ["1", "2"]


def test_patient_search(store):
    doc = body(dispatch(store, "GET", "/Patient?study=study-demo"))
    assert doc["total"] == 2 and [e["id"] for e in doc["entry"]] == ["1", "2"]
    assert dispatch(store, "GET", "/Patient?study=nope")[0] == 404
    assert dispatch(store, "GET", "/Media?study=study-demo")[0] == 400


def test_objects_get_put(store):
    key = body(dispatch(store, "GET", "/Media/media-1"))["content_url"]
    status, ctype, blob = dispatch(store, "GET", f"/objects/{key}")
    assert status == 200 and decode_png(blob).pixels.max() == 0
    assert dispatch(store, "PUT", "/objects/extra/x.bin", b"abc")[0] == 201
    assert store.objects.get("extra/x.bin") == b"abc"


@pytest.mark.parametrize(
    "method, path, status",
    [("GET", "/Patient/zzz", 404), ("GET", "/Observation/1", 404), ("PUT", "/Patient/1", 405), ("GET", "/objects/none", 404), ("GET", "/", 404)],
)
def test_errors(store, method, path, status):
    assert dispatch(store, method, path)[0] == status


def test_over_http(store):
    server = serve(store)
    try:
        host, port = server.server_address
        with urllib.request.urlopen(f"http://{host}:{port}/Patient/2") as resp:
            assert json.load(resp)["id"] == "2"
    finally:
        server.shutdown()
        server.server_close()
