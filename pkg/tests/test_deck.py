"""Deck rendering, fallback/remote embedding, cache transparency."""
import itertools
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from fraclab.core import material_registry
from fraclab.deck import (
    BOUNDARIES,
    SIMULATIONS,
    TARGETS,
    DeckMeta,
    EmbedCache,
    EmbedProtocolError,
    EmbedTransportError,
    FallbackProvider,
    RemoteProvider,
    context_for_meta,
    embed,
    progression_token,
    render_deck,
)


class TestRenderDeck:
    def test_reference_sentence(self):
        meta = DeckMeta("phase-field", "steel", "axial loading", "fracture pattern")
        assert render_deck(meta) == (
            "A simulation using the phase-field method on steel under axial loading, "
            "aiming to predict the final fracture pattern."
        )

    def test_byte_identical_rendering(self):
        meta = DeckMeta("rule-based", "tungsten", "biaxial loading", "time to failure")
        assert render_deck(meta).encode() == render_deck(meta).encode()

    def test_vocabulary_terms_appear_exactly_once(self):
        meta = DeckMeta("rule-based", "pbx", "biaxial loading", "time to failure")
        text = render_deck(meta)
        for term in ("rule-based", "PBX", "biaxial loading", "time to failure"):
            assert text.count(term) == 1, (term, text)

    def test_vocabulary_violations_name_the_field(self):
        with pytest.raises(ValueError, match="simulation"):
            DeckMeta("spectral", "steel", "axial loading", "fracture pattern")
        with pytest.raises(ValueError, match="boundary"):
            DeckMeta("phase-field", "steel", "shear loading", "fracture pattern")
        with pytest.raises(ValueError, match="target"):
            DeckMeta("phase-field", "steel", "axial loading", "stress field")
        with pytest.raises(ValueError, match="material"):
            render_deck(DeckMeta("phase-field", "unobtanium", "axial loading", "fracture pattern"))

    def test_progression_only_with_trajectory_target(self):
        with pytest.raises(ValueError, match="progression"):
            DeckMeta("phase-field", "steel", "axial loading", "fracture pattern", progression=0.5)
        with pytest.raises(ValueError, match="progression"):
            DeckMeta("phase-field", "steel", "axial loading", "dynamic trajectory")
        DeckMeta("phase-field", "steel", "axial loading", "dynamic trajectory", progression=0.63)


class TestFallbackProvider:
    def test_deterministic(self):
        p = FallbackProvider(dim=64)
        a = p.embed("A simulation of steel.")
        b = p.embed("A simulation of steel.")
        assert a.tobytes() == b.tobytes()

    def test_shape_truncation_padding(self):
        p = FallbackProvider(dim=32, n_tokens=8)
        short = p.embed("one two")
        long = p.embed(" ".join(str(k) for k in range(50)))
        assert short.shape == (8, 32)
        assert long.shape == (8, 32)

    def test_normalization_contract(self):
        p = FallbackProvider(dim=256)
        mat = p.embed("A simulation using the rule-based method on PBX.")
        means = mat.mean(axis=1)
        stds = mat.std(axis=1)
        assert np.abs(means).max() < 0.1
        assert np.abs(stds - 1.0).max() < 0.1

    def test_full_vocabulary_cross_product_no_collisions(self):
        p = FallbackProvider(dim=64)
        mats = sorted(material_registry())
        texts = []
        for sim, mat, bc, tgt in itertools.product(SIMULATIONS, mats, BOUNDARIES, TARGETS):
            prog = 0.65 if tgt == "dynamic trajectory" else None
            texts.append(render_deck(DeckMeta(sim, mat, bc, tgt, progression=prog)))
        unique = sorted(set(texts))
        embeddings = [p.embed(t).tobytes() for t in unique]
        assert len(set(embeddings)) == len(unique)

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError):
            FallbackProvider().embed("")


class TestCache:
    def test_cache_transparency(self, tmp_path):
        cache = EmbedCache(tmp_path)
        p = FallbackProvider(dim=48)
        text = "A simulation using the phase-field method on shale under axial loading."
        cold = embed(text, p, cache=cache)
        warm = embed(text, p, cache=cache)
        assert cold.tokens.tobytes() == warm.tokens.tobytes()
        assert len(list(tmp_path.glob("*.ctx"))) == 1

    def test_cache_keyed_by_provider(self, tmp_path):
        cache = EmbedCache(tmp_path)
        text = "identical text"
        a = embed(text, FallbackProvider(dim=16), cache=cache)
        b = embed(text, FallbackProvider(dim=24), cache=cache)
        assert a.tokens.shape != b.tokens.shape
        assert len(list(tmp_path.glob("*.ctx"))) == 2

    def test_expected_dim_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="does not match"):
            embed("text", FallbackProvider(dim=16), expected_dim=32)


class _MockEmbedHandler(BaseHTTPRequestHandler):
    matrix = np.arange(12, dtype=np.float32).reshape(3, 4)

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        payload = json.loads(self.rfile.read(length))
        if self.path != "/embed" or "text" not in payload:
            self.send_response(400)
            self.end_headers()
            self.wfile.write(json.dumps({"error": "bad request"}).encode())
            return
        if payload.get("layer", 0) >= 40:
            self.send_response(400)
            body = json.dumps({"error": "layer 40 out of range (model depth 4)"})
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(body.encode())
            return
        body = json.dumps(
            {
                "dim": 4,
                "tokens": 3,
                "data": [float(x) for x in self.matrix.ravel()],
            }
        )
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body.encode())

    def log_message(self, *args):
        pass


@pytest.fixture()
def mock_server():
    server = HTTPServer(("127.0.0.1", 0), _MockEmbedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestRemoteProvider:
    def test_round_trip_exact_matrix(self, mock_server):
        provider = RemoteProvider(mock_server, layer=2)
        ctx = embed("some deck text", provider)
        assert np.array_equal(ctx.tokens, _MockEmbedHandler.matrix)

    def test_protocol_error_surfaces_message(self, mock_server):
        provider = RemoteProvider(mock_server, layer=40)
        with pytest.raises(EmbedProtocolError, match="out of range"):
            provider.embed("text")

    def test_transport_error_when_unreachable(self):
        provider = RemoteProvider("http://127.0.0.1:9", timeout=0.2)
        with pytest.raises(EmbedTransportError):
            provider.embed("text")


class TestProgressionToken:
    def test_grid_points_distinct(self):
        pts = [0.3 + 0.7 * k / 9 for k in range(10)]
        assert pts[4] == pytest.approx(0.6111, abs=1e-4)
        vecs = [progression_token(p, 64).tobytes() for p in pts]
        assert len(set(vecs)) == 10

    def test_determinism(self):
        assert np.array_equal(progression_token(0.65, 128), progression_token(0.65, 128))

    def test_endpoints_not_parallel(self):
        a = progression_token(0.3, 64).ravel().astype(np.float64)
        b = progression_token(1.0, 64).ravel().astype(np.float64)
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos < 1.0 - 1e-6

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            progression_token(0.2, 64)
        with pytest.raises(ValueError):
            progression_token(1.1, 64)

    def test_context_for_meta_appends_token(self):
        p = FallbackProvider(dim=32, n_tokens=8)
        base = DeckMeta("phase-field", "steel", "axial loading", "fracture pattern")
        traj = DeckMeta("phase-field", "steel", "axial loading", "dynamic trajectory",
                        progression=0.65)
        assert context_for_meta(base, p).tokens.shape == (8, 32)
        assert context_for_meta(traj, p).tokens.shape == (9, 32)
