"""scikit-learn style wrapper around training and inference."""
from dataclasses import asdict

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import pipeline
from ._validation import check_scenes
from .evaluation import coco_ap
from .losses import LossWeights, weights_from_dict
from .models import load_checkpoint, save_params


class GeometryAwareSegmenter(BaseEstimator):
    """Instance segmenter fusing image, disparity-patch and point-set masks.

    ``fit`` takes a list of :class:`gaisnet.data.SceneRecord`; ``predict``
    returns one list of :class:`gaisnet.evaluation.Detection` per scene.
    ``representations`` selects the enabled mask heads: ``"2d"``,
    ``"2d+25d"``, ``"2d+3d"`` or ``"full"``.
    """

    def __init__(self, representations="full", epochs=20, batch_size=4, lr=0.01, momentum=0.9,
                 seed=0, n_points=1024, grid_size=14, channels=32, loss_weights=None,
                 standardize_disparity=True, cont_on_all_masks=False, jitter=0.15,
                 negatives_per_image=4, score_threshold=0.05):
        self.representations = representations
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.seed = seed
        self.n_points = n_points
        self.grid_size = grid_size
        self.channels = channels
        self.loss_weights = loss_weights
        self.standardize_disparity = standardize_disparity
        self.cont_on_all_masks = cont_on_all_masks
        self.jitter = jitter
        self.negatives_per_image = negatives_per_image
        self.score_threshold = score_threshold

    def _config(self, representations=None):
        weights = self.loss_weights
        if weights is None:
            weights = LossWeights()
        elif isinstance(weights, dict):
            weights = weights_from_dict(weights)
        return pipeline.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            seed=self.seed, weights=weights, n_points=self.n_points, grid_size=self.grid_size,
            representations=representations or self.representations, channels=self.channels,
            standardize_disparity=self.standardize_disparity,
            cont_on_all_masks=self.cont_on_all_masks, jitter=self.jitter,
            negatives_per_image=self.negatives_per_image, score_threshold=self.score_threshold,
        )

    def fit(self, scenes, y=None, callback=None):
        scenes = check_scenes(scenes)
        config = self._config()
        self.model_, self.loss_log_ = pipeline.train(scenes, config, callback=callback)
        self.categories_ = tuple(scenes[0].categories)
        return self

    def predict(self, scenes, representations=None):
        """Detections per scene; ``representations`` overrides the fusion set at inference."""
        check_is_fitted(self, "model_")
        config = self._config(representations)
        self._check_heads(config)
        return [pipeline.infer(s, self.model_, config) for s in check_scenes(scenes)]

    def _check_heads(self, config):
        trained = self._config().representations
        if config.use_25d and trained not in ("2d+25d", "full"):
            raise ValueError(f"2.5D head was not trained (representations={trained!r})")
        if config.use_3d and trained not in ("2d+3d", "full"):
            raise ValueError(f"3D head was not trained (representations={trained!r})")

    def evaluate(self, scenes, representations=None):
        """``{"segm": EvalResult, "bbox": EvalResult}`` on ground truth from ``scenes``."""
        scenes = check_scenes(scenes)
        dets = [d for per_scene in self.predict(scenes, representations) for d in per_scene]
        gts = [g for s in scenes for g in pipeline.ground_truths(s)]
        return {"segm": coco_ap(dets, gts, "segm"), "bbox": coco_ap(dets, gts, "bbox")}

    def score(self, scenes, y=None):
        """Mask AP (percent)."""
        return self.evaluate(scenes)["segm"].AP

    def save(self, path):
        check_is_fitted(self, "model_")
        params = self.get_params()
        if isinstance(params["loss_weights"], LossWeights):
            params["loss_weights"] = asdict(params["loss_weights"])
        save_params(self.model_, path, extra={"estimator": params,
                                              "categories": list(self.categories_)})

    @classmethod
    def load(cls, path):
        model, meta = load_checkpoint(path)
        extra = meta.get("extra", {})
        if "estimator" not in extra:
            raise NotFittedError(f"{path} holds parameters but no estimator settings")
        est = cls(**extra["estimator"])
        est.model_ = model
        est.loss_log_ = []
        est.categories_ = tuple(extra.get("categories", ()))
        return est

