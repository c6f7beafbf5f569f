"""Per-pixel auto-regressive decoding: heads, sampler, hidden updates."""

import math

import numpy as np
import pytest

from seqdet3d.backbone import GridConfig
from seqdet3d.errors import ShapeMismatchError
from seqdet3d.geometry import Box3D, footprint
from seqdet3d.numerics import ParamStore, Tensor, constant, grad_check, tsum
from seqdet3d.seq_decoder import (
    SAMPLE_COUNTS,
    DenseSequenceMap,
    decode_scene,
    init_decoder_params,
    init_hidden,
    predict_word,
    sample_points,
    update_hidden,
)
from seqdet3d.words import (
    ABLATION_ORDERS,
    CATEGORY,
    DEFAULT_ORDER,
    LOCATION,
    ORIENTATION,
    SIZE,
    WordOrder,
)

GRID = GridConfig(extent=((0.0, 4.0), (0.0, 4.0)), h=4, w=4, cell=1.0, c=8)
N_CLASSES = 2


def make_store(seed=0, grid=GRID, n_classes=N_CLASSES) -> ParamStore:
    store = ParamStore()
    init_decoder_params(store, grid, n_classes, np.random.default_rng(seed))
    return store


def random_feature_map(seed=0, grid=GRID) -> Tensor:
    rng = np.random.default_rng(seed)
    return constant(rng.normal(0.0, 1.0, size=(grid.h, grid.w, grid.c)))


# ---------------------------------------------------------------------------
# naive reference decoder: scalar loops only, no shared code paths
# ---------------------------------------------------------------------------


def naive_bilinear(hidden, row, col):
    h, w, c = hidden.shape
    r0, c0 = math.floor(row), math.floor(col)
    fr, fc = row - r0, col - c0
    out = np.zeros(c)
    for dr, dc, wt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr, cc = r0 + dr, c0 + dc
        if 0 <= rr < h and 0 <= cc < w:
            out += hidden[rr, cc] * wt
    return out


def naive_meters_to_cells(x, y, grid):
    (x_lo, _), (y_lo, _) = grid.extent
    return (x - x_lo) / grid.cell - 0.5, (y - y_lo) / grid.cell - 0.5


def naive_sample_points(words, position, centers, extent, grid):
    out = []
    for p, (rx, ry) in enumerate(centers):
        cx, cy = rx, ry
        if LOCATION in words:
            cx = rx + words[LOCATION][p][0] * extent[0]
            cy = ry + words[LOCATION][p][1] * extent[1]
        if position == 0:
            out.append([(cx, cy)])
            continue
        theta = 0.0
        if ORIENTATION in words:
            theta = math.atan2(words[ORIENTATION][p][0], words[ORIENTATION][p][1])
        u = (math.cos(theta), math.sin(theta))
        v = (-math.sin(theta), math.cos(theta))
        if position == 1:
            hl, hw = 0.5 * extent[0], 0.5 * extent[1]
            out.append([
                (cx + hl * u[0], cy + hl * u[1]),
                (cx - hl * u[0], cy - hl * u[1]),
                (cx + hw * v[0], cy + hw * v[1]),
                (cx - hw * v[0], cy - hw * v[1]),
            ])
        else:
            if SIZE in words:
                hl = 0.5 * math.exp(min(max(words[SIZE][p][0], -500.0), 500.0))
                hw = 0.5 * math.exp(min(max(words[SIZE][p][1], -500.0), 500.0))
            else:
                hl = hw = 0.5 * grid.cell
            out.append([
                (cx + hl * u[0] + hw * v[0], cy + hl * u[1] + hw * v[1]),
                (cx - hl * u[0] + hw * v[0], cy - hl * u[1] + hw * v[1]),
                (cx - hl * u[0] - hw * v[0], cy - hl * u[1] - hw * v[1]),
                (cx + hl * u[0] - hw * v[0], cy + hl * u[1] - hw * v[1]),
            ])
    return out


def naive_decode(fdata, store, order, grid, n_classes):
    """Reference decode returning raw word arrays keyed by step symbol."""
    h, w, c = fdata.shape
    extent = (grid.cell, grid.cell)
    (x_lo, _), (y_lo, _) = grid.extent
    centers = [
        (x_lo + (i + 0.5) * grid.cell, y_lo + (k + 0.5) * grid.cell)
        for i in range(h)
        for k in range(w)
    ]
    dims = {LOCATION: 3, ORIENTATION: 2, SIZE: 3, CATEGORY: n_classes + 1}
    hidden = fdata.copy()
    words = {}
    for position, step in enumerate(order.steps):
        wm = store[f"decoder/head_{step}/w"].data
        bv = store[f"decoder/head_{step}/b"].data
        word = np.zeros((h * w, dims[step]))
        for p in range(h * w):
            i, k = divmod(p, w)
            for d in range(dims[step]):
                acc = bv[d]
                for ch in range(c):
                    acc += hidden[i, k, ch] * wm[ch, d]
                word[p, d] = acc
        words[step] = word
        if position < len(SAMPLE_COUNTS):
            pts = naive_sample_points(words, position, centers, extent, grid)
            am = store[f"decoder/agg{position + 1}/w"].data
            ab = store[f"decoder/agg{position + 1}/b"].data
            nxt = np.zeros_like(hidden)
            for p in range(h * w):
                samples = [
                    naive_bilinear(hidden, *naive_meters_to_cells(x, y, grid))
                    for x, y in pts[p]
                ]
                vec = np.concatenate(samples)
                i, k = divmod(p, w)
                for d in range(c):
                    acc = ab[d]
                    for q in range(len(vec)):
                        acc += vec[q] * am[q, d]
                    nxt[i, k, d] = max(acc, 0.0)
            hidden = nxt
    return words


# ---------------------------------------------------------------------------


class TestInitHidden:
    def test_first_hidden_state_is_the_feature_map(self):
        f = random_feature_map(1)
        assert init_hidden(f) is f

    def test_gradient_reaches_feature_map(self):
        store = make_store(2)
        store.add("fmap", np.random.default_rng(3).normal(size=(4, 4, 8)))
        out = decode_scene(store["fmap"], store, DEFAULT_ORDER, GRID, N_CLASSES)
        tsum(out.loc).backward()
        assert np.any(store["fmap"].grad != 0.0)


class TestPredictWord:
    def test_zero_hidden_zero_bias_gives_zero_word(self):
        store = make_store(4)
        store[f"decoder/head_{LOCATION}/b"].data[:] = 0.0
        out = predict_word(constant(np.zeros((4, 4, 8))), LOCATION, store, N_CLASSES)
        np.testing.assert_array_equal(out.data, np.zeros((16, 3)))

    def test_zero_hidden_zero_bias_gives_uniform_category(self):
        store = make_store(5)
        store[f"decoder/head_{CATEGORY}/b"].data[:] = 0.0
        out = decode_scene(constant(np.zeros((4, 4, 8))), store, DEFAULT_ORDER,
                           GRID, N_CLASSES)
        # zero F keeps H_4 independent of the pixel, but only the zero logits
        # case guarantees a uniform distribution when the bias is removed
        zero_logits = predict_word(constant(np.zeros((4, 4, 8))), CATEGORY,
                                   store, N_CLASSES)
        np.testing.assert_array_equal(zero_logits.data, np.zeros((16, 3)))
        del out

    def test_identical_hidden_vectors_get_identical_words(self):
        store = make_store(6)
        vec = np.random.default_rng(7).normal(size=8)
        hidden = constant(np.tile(vec, (4, 4, 1)))
        for step in (LOCATION, ORIENTATION, SIZE, CATEGORY):
            out = predict_word(hidden, step, store, N_CLASSES).data
            np.testing.assert_array_equal(out, np.tile(out[0], (16, 1)))

    def test_single_pixel_matches_hand_product(self):
        grid = GridConfig(extent=((0.0, 1.0), (0.0, 1.0)), h=1, w=1, cell=1.0, c=8)
        store = make_store(8, grid=grid)
        rng = np.random.default_rng(9)
        hvec = rng.normal(size=8)
        out = predict_word(constant(hvec.reshape(1, 1, 8)), SIZE, store, N_CLASSES)
        expected = hvec @ store["decoder/head_S/w"].data + store["decoder/head_S/b"].data
        np.testing.assert_allclose(out.data[0], expected, rtol=0, atol=1e-14)

    def test_rejects_mismatched_head(self):
        store = make_store(10)
        with pytest.raises(ShapeMismatchError):
            predict_word(constant(np.zeros((4, 4, 8))), CATEGORY, store, N_CLASSES + 1)


class TestSamplePoints:
    def test_center_pattern_uses_decoded_centers(self):
        centers = GRID.cell_centers()
        loc = np.zeros((16, 3))
        loc[:, 0] = 0.25
        loc[:, 1] = -0.5
        pts = sample_points({LOCATION: loc}, 0, GRID, centers, (1.0, 1.0))
        assert pts.shape == (16, 1, 2)
        np.testing.assert_allclose(pts[:, 0, 0], centers[:, 0] + 0.25)
        np.testing.assert_allclose(pts[:, 0, 1], centers[:, 1] - 0.5)

    def test_center_pattern_falls_back_to_region_centers(self):
        centers = GRID.cell_centers()
        pts = sample_points({}, 0, GRID, centers, (1.0, 1.0))
        np.testing.assert_array_equal(pts[:, 0, :], centers)

    def test_zero_heading_probes_are_half_cell_neighbors(self):
        centers = GRID.cell_centers()
        words = {
            LOCATION: np.zeros((16, 3)),
            ORIENTATION: np.tile([0.0, 1.0], (16, 1)),   # sin=0, cos=1
        }
        pts = sample_points(words, 1, GRID, centers, (GRID.cell, GRID.cell))
        assert pts.shape == (16, 4, 2)
        cells = GRID.meters_to_cells(pts.reshape(-1, 2)).reshape(16, 4, 2)
        own = GRID.meters_to_cells(centers)
        np.testing.assert_allclose(cells[:, 0], own + [0.5, 0.0], atol=1e-12)
        np.testing.assert_allclose(cells[:, 1], own - [0.5, 0.0], atol=1e-12)
        np.testing.assert_allclose(cells[:, 2], own + [0.0, 0.5], atol=1e-12)
        np.testing.assert_allclose(cells[:, 3], own - [0.0, 0.5], atol=1e-12)

    def test_heading_fallback_is_zero_angle(self):
        centers = GRID.cell_centers()
        with_default = sample_points(
            {ORIENTATION: np.tile([0.0, 1.0], (16, 1))}, 1, GRID, centers, (1.0, 1.0))
        without = sample_points({}, 1, GRID, centers, (1.0, 1.0))
        np.testing.assert_allclose(without, with_default, atol=1e-15)

    def test_equal_sides_give_rotated_square(self):
        centers = np.array([[2.0, 2.0]])
        theta = 0.7
        words = {
            ORIENTATION: np.array([[math.sin(theta), math.cos(theta)]]),
            SIZE: np.log(np.array([[1.6, 1.6, 1.0]])),
        }
        pts = sample_points(words, 2, GRID, centers, (1.0, 1.0))[0]
        sides = [np.linalg.norm(pts[(i + 1) % 4] - pts[i]) for i in range(4)]
        np.testing.assert_allclose(sides, [1.6] * 4, atol=1e-12)
        diagonals = [np.linalg.norm(pts[2] - pts[0]), np.linalg.norm(pts[3] - pts[1])]
        np.testing.assert_allclose(diagonals, [1.6 * math.sqrt(2)] * 2, atol=1e-12)

    def test_corner_pattern_matches_box_footprint(self):
        theta = math.pi / 4
        centers = np.array([[1.5, 2.5]])
        words = {
            LOCATION: np.zeros((1, 3)),
            ORIENTATION: np.array([[math.sin(theta), math.cos(theta)]]),
            SIZE: np.log(np.array([[2.0, 1.0, 1.0]])),
        }
        pts = sample_points(words, 2, GRID, centers, (1.0, 1.0))[0]
        box = Box3D(x=1.5, y=2.5, z=0.0, l=2.0, w=1.0, h=1.0, theta=theta)
        np.testing.assert_allclose(pts, footprint(box), atol=1e-12)

    def test_size_fallback_uses_cell_footprint(self):
        centers = np.array([[2.0, 2.0]])
        pts = sample_points({}, 2, GRID, centers, (1.0, 1.0))[0]
        expected = footprint(Box3D(x=2.0, y=2.0, z=0.0, l=GRID.cell, w=GRID.cell,
                                   h=1.0, theta=0.0))
        np.testing.assert_allclose(pts, expected, atol=1e-12)

    def test_rejects_unknown_position(self):
        with pytest.raises(ValueError):
            sample_points({}, 3, GRID, GRID.cell_centers(), (1.0, 1.0))


class TestUpdateHidden:
    def test_identity_aggregation_is_relu(self):
        store = ParamStore()
        store.add("decoder/agg1/w", np.eye(8))
        store.add("decoder/agg1/b", np.zeros(8))
        hidden = random_feature_map(11)
        pts = GRID.cell_centers().reshape(16, 1, 2)
        out = update_hidden(hidden, pts, 0, store, GRID)
        np.testing.assert_allclose(out.data, np.maximum(hidden.data, 0.0), atol=1e-15)

    def test_zero_hidden_gives_bias_only_output(self):
        store = make_store(12)
        bias = store["decoder/agg2/b"].data
        pts = np.tile(GRID.cell_centers()[:, None, :], (1, 4, 1))
        out = update_hidden(constant(np.zeros((4, 4, 8))), pts, 1, store, GRID)
        np.testing.assert_allclose(
            out.data, np.broadcast_to(np.maximum(bias, 0.0), (4, 4, 8)), atol=1e-15)

    def test_single_pixel_matches_hand_aggregation(self):
        store = make_store(13)
        hidden = random_feature_map(14)
        rng = np.random.default_rng(15)
        pts = np.tile(GRID.cell_centers()[:, None, :], (1, 4, 1))
        pts[0] = rng.uniform(0.5, 3.5, size=(4, 2))
        out = update_hidden(hidden, pts, 1, store, GRID)
        samples = [
            naive_bilinear(hidden.data, *naive_meters_to_cells(x, y, GRID))
            for x, y in pts[0]
        ]
        expected = np.maximum(
            np.concatenate(samples) @ store["decoder/agg2/w"].data
            + store["decoder/agg2/b"].data, 0.0)
        np.testing.assert_allclose(out.data.reshape(16, 8)[0], expected, atol=1e-12)

    def test_rejects_wrong_point_count(self):
        store = make_store(16)
        pts = GRID.cell_centers().reshape(16, 1, 2)
        with pytest.raises(ShapeMismatchError):
            update_hidden(random_feature_map(17), pts, 1, store, GRID)


class TestDecodeScene:
    def test_one_sequence_per_pixel_on_the_grid(self):
        store = make_store(18)
        out = decode_scene(random_feature_map(19), store, DEFAULT_ORDER, GRID, N_CLASSES)
        assert isinstance(out, DenseSequenceMap)
        seqs = out.sequences()
        assert len(seqs) == GRID.n_pixels
        centers = GRID.cell_centers()
        for p, seq in enumerate(seqs):
            assert seq.region.r_x == centers[p, 0]
            assert seq.region.r_y == centers[p, 1]
            assert seq.region.r_l == GRID.cell
            assert seq.region.r_w == GRID.cell
            np.testing.assert_allclose(seq.category.p.sum(), 1.0, atol=1e-12)

    def test_deterministic(self):
        store = make_store(20)
        f = random_feature_map(21)
        a = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        b = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        for field in ("loc", "ori", "size", "cat_logits", "cat_probs"):
            np.testing.assert_array_equal(getattr(a, field).data, getattr(b, field).data)
        for pa, pb in zip(a.sample_points, b.sample_points):
            np.testing.assert_array_equal(pa, pb)

    def test_category_params_cannot_reach_earlier_words(self):
        store = make_store(22)
        f = random_feature_map(23)
        before = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        store["decoder/head_C/w"].data += 1.0
        store["decoder/head_C/b"].data -= 0.5
        after = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        for field in ("loc", "ori", "size"):
            np.testing.assert_array_equal(getattr(before, field).data,
                                          getattr(after, field).data)
        assert np.any(before.cat_logits.data != after.cat_logits.data)

    def test_last_aggregation_only_reaches_the_last_word(self):
        store = make_store(24)
        f = random_feature_map(25)
        before = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        store["decoder/agg3/w"].data += 0.1
        after = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        for field in ("loc", "ori", "size"):
            np.testing.assert_array_equal(getattr(before, field).data,
                                          getattr(after, field).data)
        assert np.any(before.cat_logits.data != after.cat_logits.data)

    def test_midstream_params_respect_prediction_order(self):
        store = make_store(26)
        f = random_feature_map(27)
        before = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        store["decoder/head_O/w"].data += 0.5
        after = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        np.testing.assert_array_equal(before.loc.data, after.loc.data)
        assert np.any(before.ori.data != after.ori.data)
        assert np.any(before.size.data != after.size.data)

    def test_forced_points_replay_reproduces_the_decode(self):
        store = make_store(28)
        f = random_feature_map(29)
        first = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        replay = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES,
                              forced_sample_points=first.sample_points)
        for field in ("loc", "ori", "size", "cat_logits"):
            np.testing.assert_array_equal(getattr(first, field).data,
                                          getattr(replay, field).data)

    def test_forced_points_change_downstream_words_only(self):
        store = make_store(30)
        f = random_feature_map(31)
        first = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        shifted = tuple(p + 0.25 for p in first.sample_points)
        second = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES,
                              forced_sample_points=shifted)
        np.testing.assert_array_equal(first.loc.data, second.loc.data)
        assert np.any(first.ori.data != second.ori.data)

    def test_rejects_feature_map_grid_mismatch(self):
        store = make_store(32)
        with pytest.raises(ShapeMismatchError):
            decode_scene(constant(np.zeros((3, 4, 8))), store, DEFAULT_ORDER,
                         GRID, N_CLASSES)

    def test_all_orders_produce_valid_maps(self):
        store = make_store(33)
        f = random_feature_map(34)
        for order in ABLATION_ORDERS:
            out = decode_scene(f, store, order, GRID, N_CLASSES)
            for field in ("loc", "ori", "size", "cat_logits"):
                assert np.all(np.isfinite(getattr(out, field).data))

    def test_order_changes_the_outcome(self):
        store = make_store(35)
        f = random_feature_map(36)
        default = decode_scene(f, store, DEFAULT_ORDER, GRID, N_CLASSES)
        other = decode_scene(f, store, WordOrder.parse("R,C,O,S,L"), GRID, N_CLASSES)
        assert np.any(default.loc.data != other.loc.data)


class TestNaiveEquivalence:
    @pytest.mark.parametrize("order", ABLATION_ORDERS, ids=str)
    def test_matches_scalar_reference(self, order):
        store = make_store(37)
        f = random_feature_map(38)
        out = decode_scene(f, store, order, GRID, N_CLASSES)
        ref = naive_decode(f.data, store, order, GRID, N_CLASSES)
        np.testing.assert_allclose(out.loc.data, ref[LOCATION], rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.ori.data, ref[ORIENTATION], rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.size.data, ref[SIZE], rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.cat_logits.data, ref[CATEGORY], rtol=0,
                                   atol=1e-12)


class TestGradients:
    def test_decoder_parameters_pass_finite_difference_check(self):
        store = make_store(39)
        rng = np.random.default_rng(40)
        store.add("fmap", rng.normal(0.0, 1.0, size=(4, 4, 8)))
        frozen = decode_scene(store["fmap"], store, DEFAULT_ORDER, GRID,
                              N_CLASSES).sample_points
        weights = {
            "loc": constant(rng.normal(size=(16, 3))),
            "ori": constant(rng.normal(size=(16, 2))),
            "size": constant(rng.normal(size=(16, 3))),
            "cat_probs": constant(rng.normal(size=(16, 3))),
        }

        def objective():
            out = decode_scene(store["fmap"], store, DEFAULT_ORDER, GRID,
                               N_CLASSES, forced_sample_points=frozen)
            total = None
            for field, wt in weights.items():
                term = tsum(getattr(out, field) * wt)
                total = term if total is None else total + term
            return total

        err, per_param = grad_check(store, objective)
        assert err < 1e-4, per_param
