import httpx
import numpy as np
import pytest

from rubricloop.config import ProviderSettings
from rubricloop.embeddings import (
    HashingEmbedder,
    RemoteEmbedder,
    embedder_from_settings,
    normalize_rows,
)


def test_hashing_embedder_is_deterministic_and_unit_length():
    embedder = HashingEmbedder()
    first = embedder.embed("The unit price is 3 dollars.", "a")
    second = HashingEmbedder().embed("the  UNIT price is 3 dollars.", "a")
    assert first.values == second.values
    assert np.linalg.norm(first.to_array()) == pytest.approx(1.0)


def test_similar_texts_are_closer_than_unrelated_ones():
    vectors = HashingEmbedder().embed_many(
        [
            "I divided 12 by 4 to get the unit price of 3.",
            "I divided 12 by 4 and got a unit price of 3 dollars.",
            "My favorite color is blue and I had pizza.",
        ],
        ["a", "b", "c"],
    )
    sims = vectors @ vectors[0]
    assert sims[1] > sims[2]


def test_word_order_paraphrase_beats_an_unrelated_topic():
    embedder = HashingEmbedder()
    query = embedder.embed("ratio and proportion").to_array()
    paraphrase = embedder.embed("proportion and ratio").to_array()
    unrelated = embedder.embed("photosynthesis steps").to_array()
    assert float(query @ paraphrase) > float(query @ unrelated)


def test_empty_text_gets_a_basis_vector():
    row = HashingEmbedder().embed("", "empty-1").to_array()
    assert np.count_nonzero(row) == 1
    assert np.linalg.norm(row) == pytest.approx(1.0)


def test_normalize_rows_handles_zero_rows():
    out = normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0]]), ["x", "y"])
    assert out[0] == pytest.approx([0.6, 0.8])
    assert np.linalg.norm(out[1]) == pytest.approx(1.0)


def _remote(handler):
    settings = ProviderSettings(
        api_key="k", embedding_url="http://embeddings.test/v1", max_retries=2, backoff_multiplier=0.0
    )
    return RemoteEmbedder(settings, transport=httpx.MockTransport(handler))


def test_remote_embedder_orders_by_index_and_caches():
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        return httpx.Response(
            200,
            json={
                "data": [
                    {"index": 1, "embedding": [0.0, 2.0]},
                    {"index": 0, "embedding": [3.0, 0.0]},
                ]
            },
        )

    embedder = _remote(handler)
    vectors = embedder.embed_many(["first", "second"], ["a", "b"])
    assert vectors[0] == pytest.approx([1.0, 0.0])
    assert vectors[1] == pytest.approx([0.0, 1.0])
    embedder.embed_many(["second", "first"], ["b", "a"])
    assert len(calls) == 1
    assert str(calls[0].url) == "http://embeddings.test/v1/embeddings"


def test_remote_embedder_falls_back_to_hashing():
    embedder = _remote(lambda request: httpx.Response(503))
    texts = ["alpha beta", "gamma delta"]
    fallback = embedder.embed_many(texts, ["a", "b"])
    assert np.allclose(fallback, HashingEmbedder().embed_many(texts, ["a", "b"]))


def test_embedder_from_settings():
    assert isinstance(embedder_from_settings(ProviderSettings(kind="scenario")), HashingEmbedder)
    live = ProviderSettings(kind="live", api_key="k", embedding_url="http://embeddings.test/v1")
    assert isinstance(embedder_from_settings(live), RemoteEmbedder)
