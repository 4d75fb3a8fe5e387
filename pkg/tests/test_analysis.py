import json

import numpy as np
import pytest

from vtoken import analysis as A
from vtoken import data as D
from vtoken import objectives as O
from vtoken.tensor import Tensor


@pytest.fixture
def img():
    return D.render("red", "square", "top", "left", np.random.default_rng(0))


class TestNearestToken:
    def test_exact_row(self):
        E = np.random.default_rng(0).standard_normal((16, 8))
        assert all(A.nearest_token(E[j], E) == j for j in range(16))

    def test_scale_invariant(self):
        E = np.random.default_rng(1).standard_normal((16, 8))
        assert A.nearest_token(5 * E[7], E) == 7

    def test_against_exhaustive_scan(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            E = rng.standard_normal((16, 6))
            x = rng.standard_normal(6)
            best, best_j = -2.0, None
            for j in range(16):
                c = float(x @ E[j]) / (np.sqrt(x @ x) * np.sqrt(E[j] @ E[j]))
                if c > best:
                    best, best_j = c, j
            assert A.nearest_token(x, E) == best_j

    def test_ties_take_smallest_index(self):
        E = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        assert A.nearest_token(np.array([2.0, 0.0]), E) == 0

    def test_zero_vector(self):
        with pytest.raises(A.DegenerateInputError):
            A.nearest_token(np.zeros(4), np.eye(4))
        with pytest.raises(A.DegenerateInputError):
            A.nearest_token(np.ones(2), np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestTokenMaps:
    @pytest.mark.parametrize("probe", [A.token_map_nearest, A.token_map_top])
    def test_grid_shape_and_determinism(self, model, vocab, img, probe):
        a, b = probe(model, img, vocab), probe(model, img, vocab)
        assert a.grid.shape == (4, 4) and len(a.token_strings) == 4
        assert (a.grid < 64).all()
        assert a.grid.tolist() == b.grid.tolist()

    def test_top_equals_visual_token_argmax(self, model, vocab, img):
        tm = A.token_map_top(model, img, vocab)
        seq = O.assemble_input(model, img, [], [])
        probs = O.visual_tokens(model, seq).probs[0]
        assert tm.grid.ravel().tolist() == probs.argmax(-1).tolist()

    def test_nearest_row_major(self, model, vocab, img):
        tm = A.token_map_nearest(model, img, vocab)
        x = model.image_embeddings(img).data
        E = model.params["decoder.embed"].data
        expect = [A.nearest_token(x[p], E) for p in range(16)]
        assert tm.grid.ravel().tolist() == expect

    def test_json_line(self, model, vocab, img):
        rec = json.loads(A.token_map_top(model, img, vocab).to_json())
        assert rec["source"] == "top_visual_token"
        assert np.array(rec["grid"]).shape == (4, 4) and len(rec["tokens"]) == 4

    def test_color_accuracy_counts_solid_patches(self, vocab, img):
        truth = np.array([vocab[c] for c in D.parse_scene(img).patch_colors]).reshape(4, 4)
        tm = A.TokenMap(truth, [], "top_visual_token", np.ones((4, 4)))
        assert A.color_accuracy(tm, img, vocab) == (16, 16)
        assert A.object_color_accuracy(tm, img, vocab) == (4, 4)

    def test_circle_patch_not_solid(self):
        img = D.render("red", "circle", "top", "left", np.random.default_rng(0))
        assert A.solid_patch_mask(img).sum() == 15


class TestPseudoFeatures:
    def test_one_hot_selects_embedding_row(self):
        E = Tensor(np.random.default_rng(0).standard_normal((5, 3)))
        P = O.VocabDistribution.from_probs(np.eye(5)[[2, 4]])
        np.testing.assert_allclose(A.pseudo_features_from_tokens(P, E).data, E.data[[2, 4]], atol=1e-6)

    def test_uniform_gives_column_mean(self):
        E = Tensor(np.random.default_rng(1).standard_normal((5, 3)))
        P = O.VocabDistribution.from_probs(np.full((2, 5), 0.2))
        np.testing.assert_allclose(A.pseudo_features_from_tokens(P, E).data,
                                   np.tile(E.data.mean(0), (2, 1)), atol=1e-6)

    def test_convex_hull_bound(self, model, img):
        xp = A.pseudo_image_features(model, img).data
        E = model.params["decoder.embed"].data
        assert xp.shape == (16, 64)
        assert (xp >= E.min(0) - 1e-6).all() and (xp <= E.max(0) + 1e-6).all()

    def test_batch_form(self, model, img):
        single = A.pseudo_image_features(model, img).data
        batch = A.pseudo_image_features(model, np.stack([img, img])).data
        np.testing.assert_allclose(batch[1], single, atol=1e-6)

    def test_substitutable_for_visual_embeddings(self, model, vocab, img):
        xp = A.pseudo_image_features(model, img)
        seq = O.assemble_input(model, img, [], vocab.encode("red square top left"), x_image=xp)
        np.testing.assert_array_equal(seq.embeddings.data[0, 1:17], xp.data)
        assert O.loss_lm(seq, O.compute_Q(model, seq)).item() > 0
