import numpy as np
import pytest
from sklearn.base import clone

from partfusion.estimator import PartInstanceSegmenter
from partfusion.shapes import ShapeSpec, generate_shape


def tiny_corpus(n=6, points=96):
    spec = ShapeSpec("legged-table", parts=3, points=points)
    return [generate_shape(spec, i, k_levels=3) for i in range(n)]


def tiny_segmenter(**kw):
    defaults = dict(feature_dim=16, head_hidden=8, iterations=8,
                    batch_size=2, log_every=4, seed=0)
    defaults.update(kw)
    return PartInstanceSegmenter(**defaults)


class TestSklearnProtocol:
    def test_get_set_params_and_clone(self):
        est = tiny_segmenter(fusion="multi", bandwidth=0.2)
        params = est.get_params()
        assert params["fusion"] == "multi"
        assert params["bandwidth"] == 0.2
        cloned = clone(est)
        assert cloned.get_params() == params
        est.set_params(push_scale=0.075)
        assert est.push_scale == 0.075

    def test_predict_before_fit_raises(self):
        with pytest.raises(RuntimeError):
            tiny_segmenter().predict(tiny_corpus(1))


class TestFitPredict:
    def test_fit_infers_levels_and_predicts(self):
        shapes = tiny_corpus()
        est = tiny_segmenter().fit(shapes[:4])
        assert est.config_.class_counts == (2, 2, 3)
        preds = est.predict(shapes[4:])
        assert len(preds) == 2
        for pred, shape in zip(preds, shapes[4:]):
            assert pred.n_levels == 3
            for lv in pred.levels:
                assert lv.point_inst.shape == (shape.n_points,)
                assert lv.point_inst.min() >= 0
                assert np.all((lv.confidences >= 0) & (lv.confidences <= 1))

    def test_predict_accepts_raw_points(self):
        shapes = tiny_corpus(3)
        est = tiny_segmenter().fit(shapes)
        preds = est.predict([shapes[0].points])
        assert preds[0].levels[0].point_inst.shape == (shapes[0].n_points,)

    def test_mixed_class_layouts_rejected(self):
        table = generate_shape(ShapeSpec("legged-table", parts=3, points=96), 0)
        lamp = generate_shape(ShapeSpec("multi-lamp", parts=3, points=96), 0,
                              k_levels=3)
        with pytest.raises(ValueError):
            tiny_segmenter().fit([table, lamp])

    def test_fit_is_deterministic(self):
        shapes = tiny_corpus(4)
        a = tiny_segmenter().fit(shapes)
        b = tiny_segmenter().fit(shapes)
        for k in a.params_:
            np.testing.assert_array_equal(a.params_[k], b.params_[k])

    def test_offset_error_and_score(self):
        shapes = tiny_corpus(4)
        est = tiny_segmenter().fit(shapes)
        err = est.offset_error(shapes)
        assert 0 < err < 2
        score = est.score(shapes)
        assert 0.0 <= score <= 1.0

    def test_forward_outputs_shapes(self):
        shapes = tiny_corpus(2)
        est = tiny_segmenter().fit(shapes)
        out = est.forward_outputs(shapes[0])
        assert len(out.p_sem) == 3
        assert out.o_i[0].value.shape == (shapes[0].n_points, 3)
