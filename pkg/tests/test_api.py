import pytest
from fastapi.testclient import TestClient

from qgrom.core.config import settings
from qgrom.main import app
from qgrom.services.prediction_service import prediction_service


@pytest.fixture
def client(monkeypatch, tmp_path):
    monkeypatch.setattr(prediction_service, "manifest_path", str(tmp_path / "rom" / settings.MANIFEST_NAME))
    monkeypatch.setattr(prediction_service, "artifacts", None)
    return TestClient(app)


def test_health_without_manifest(client):
    for route in ("/", "/api/health"):
        response = client.get(route)
        assert response.status_code == 200
        assert response.json()["manifest_loaded"] is False
    assert not prediction_service.is_loaded()


def test_predict_without_manifest_is_not_found(client):
    response = client.post("/predict", json={"mu": [0.5], "variable": "psi1"})
    assert response.status_code == 404


def test_predict_and_nearest(client, synthetic_artifacts):
    artifacts = synthetic_artifacts()
    health = client.get("/api/health").json()
    assert health["manifest_loaded"] is True
    assert health["fingerprint"] == artifacts.fingerprint
    assert health["variables"] == ["q1", "q2", "psi1", "psi2"]

    response = client.post("/predict", json={"mu": [0.5], "variable": "psi1", "horizon_steps": 5})
    assert response.status_code == 200
    body = response.json()
    assert (body["nx"], body["ny"]) == (16, 32)
    assert len(body["values"]) == 512
    assert body["nearest_sample"] == 1
    assert body["nearest_mu"] == pytest.approx([0.45])

    response = client.post("/nearest", json={"mu": [0.33]})
    assert response.status_code == 200
    assert response.json() == {"index": 0, "mu": [0.3]}


def test_bad_requests(client, synthetic_artifacts):
    synthetic_artifacts()
    assert client.post("/predict", json={"mu": [0.5, 0.1], "variable": "q1"}).status_code == 422
    assert client.post("/predict", json={"mu": [0.5], "variable": "q1", "horizon_steps": 0}).status_code == 422
    assert client.post("/predict", json={"mu": [0.5], "variable": "omega"}).status_code == 422
