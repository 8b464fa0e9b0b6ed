from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from toxfilter_shim import ShimConfig, create_app


@pytest.fixture
def client() -> TestClient:
    with TestClient(create_app(ShimConfig(mode="mock"))) as c:
        yield c


def test_health(client):
    response = client.get("/v1/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_mock_text_rule(client):
    response = client.post("/v1/classify/text", json={"id": "r1", "text": "hello MOCK_THREAT there"})
    assert response.status_code == 200
    scores = response.json()["scores"]
    assert scores["threat"] == 0.99
    assert all(scores[name] == 0.01 for name in scores if name != "threat")
    assert list(scores) == ["toxic", "severe_toxic", "obscene", "threat", "insult", "identity_hate"]


def test_mock_text_token_must_be_whole_word(client):
    response = client.post("/v1/classify/text", json={"id": "r1", "text": "xMOCK_THREATx"})
    assert all(score == 0.01 for score in response.json()["scores"].values())


def test_mock_image_rule(client):
    response = client.post(
        "/v1/classify/image", json={"id": "r1", "image_path": "imgs/0042#O4.jpg"}
    )
    assert response.status_code == 200
    assert response.json() == {
        "rating": "Unsafe",
        "category": "O4",
        "rationale": "matched marker #O4",
    }

    response = client.post("/v1/classify/image", json={"id": "r2", "image_path": "imgs/clean.jpg"})
    assert response.json()["rating"] == "Safe"
    assert response.json()["category"] is None

    response = client.post(
        "/v1/classify/image", json={"id": "r3", "image_path": "imgs/x#O7#O2.jpg"}
    )
    assert response.json()["category"] == "O2"  # lowest code wins


def test_mock_judge_rule(client):
    verdict = {"rating": "Unsafe", "category": "O2", "rationale": "graphic violence"}
    response = client.post(
        "/v1/judge", json={"id": "r1", "preamble": "be strict", "verdict": verdict}
    )
    assert response.status_code == 200
    assert response.json()["unsafe"] is True

    verdict["rationale"] = "borderline MOCK_REJECT case"
    response = client.post(
        "/v1/judge", json={"id": "r1", "preamble": "be strict", "verdict": verdict}
    )
    assert response.json()["unsafe"] is False


def test_identical_requests_get_byte_identical_responses(client):
    bodies = [
        ("/v1/classify/text", {"id": "a", "text": "MOCK_OBSCENE and more"}),
        ("/v1/classify/image", {"id": "b", "image_path": "x#O5.jpg"}),
        (
            "/v1/judge",
            {
                "id": "c",
                "preamble": "p",
                "verdict": {"rating": "Unsafe", "category": "O1", "rationale": "r"},
            },
        ),
    ]
    for path, body in bodies:
        first = client.post(path, json=body)
        second = client.post(path, json=body)
        assert first.content == second.content


@pytest.mark.parametrize(
    "path,body",
    [
        ("/v1/classify/image", {"id": "r1"}),  # missing image_path
        ("/v1/classify/text", {"text": 17, "id": "r1"}),  # wrong type
        ("/v1/judge", {"id": "r1", "preamble": "p"}),  # missing verdict
        ("/v1/judge", {"id": "r1", "preamble": "p", "verdict": {"rating": "Unsafe"}}),
    ],
)
def test_malformed_body_is_400_json(client, path, body):
    response = client.post(path, json=body)
    assert response.status_code == 400
    assert "error" in response.json()


def test_non_json_body_is_400(client):
    response = client.post(
        "/v1/classify/text", content=b"not json", headers={"content-type": "application/json"}
    )
    assert response.status_code == 400


def test_real_mode_without_models_is_503():
    with TestClient(create_app(ShimConfig(mode="real"))) as client:
        response = client.post("/v1/classify/text", json={"id": "r1", "text": "x"})
        assert response.status_code == 503
        assert "error" in response.json()
        assert client.get("/v1/health").status_code == 200


def test_config_validation():
    with pytest.raises(ValueError, match="mode"):
        ShimConfig(mode="dream")
    with pytest.raises(ValueError, match="unknown categories"):
        ShimConfig(markers={"#x": "O77"})


def test_custom_marker_table():
    with TestClient(create_app(ShimConfig(markers={"%%bad%%": "O8"}))) as client:
        response = client.post(
            "/v1/classify/image", json={"id": "r", "image_path": "pics/%%bad%%.png"}
        )
        assert response.json()["category"] == "O8"
        response = client.post("/v1/classify/image", json={"id": "r", "image_path": "x#O4.jpg"})
        assert response.json()["rating"] == "Safe"  # default table replaced
