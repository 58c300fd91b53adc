"""scikit-learn style facade over the trainer.

``NICEModel`` takes scenes as ``X`` (ground truth rides along inside each
scene, so ``y`` is unused) and predicts one ``(masks, boxes)`` pair per scene
on the feature grid.
"""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .losses import LossConfig, LossWeights
from .model import ModelConfig, predict_scene
from .trainer import Checkpoint, TrainConfig, evaluate, train
from .validation import check_scenes


class NICEModel(BaseEstimator):
    """Cascaded mask-then-box grounding model.

    Parameters mirror :class:`TrainConfig` and :class:`ModelConfig`;
    ``box_source="tight"`` decodes boxes as the tight box of each predicted
    mask instead of through the offset field.
    """

    def __init__(self, channels=32, stride=2, embed_dim=32, vocab_size=16, layers=3, heads=4, tau=0.5,
                 hidden=128, ffn_residual=True, mode="joint", barycenter="average", epochs=20, batch_size=4,
                 lr=1e-4, schedule="step", seed=0, clip_norm=10.0, lambda_bce=1.0, lambda_dice=1.0,
                 lambda_smooth_l1=1.0, lambda_giou=1.0, xi=0.5, dice_eps=1.0, box_source="model"):
        self.channels = channels
        self.stride = stride
        self.embed_dim = embed_dim
        self.vocab_size = vocab_size
        self.layers = layers
        self.heads = heads
        self.tau = tau
        self.hidden = hidden
        self.ffn_residual = ffn_residual
        self.mode = mode
        self.barycenter = barycenter
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.schedule = schedule
        self.seed = seed
        self.clip_norm = clip_norm
        self.lambda_bce = lambda_bce
        self.lambda_dice = lambda_dice
        self.lambda_smooth_l1 = lambda_smooth_l1
        self.lambda_giou = lambda_giou
        self.xi = xi
        self.dice_eps = dice_eps
        self.box_source = box_source

    def train_config(self) -> TrainConfig:
        model = ModelConfig(self.channels, self.stride, self.embed_dim, self.vocab_size, self.layers, self.heads,
                            self.tau, self.hidden, self.ffn_residual, self.mode, self.barycenter)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, schedule=self.schedule,
                          seed=self.seed, clip_norm=self.clip_norm, model=model,
                          weights=LossWeights(self.lambda_bce, self.lambda_dice, self.lambda_smooth_l1,
                                              self.lambda_giou),
                          loss=LossConfig(self.xi, self.dice_eps))
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        cfg = self.train_config()
        scenes = check_scenes(X, cfg.model.stride, cfg.model.vocab_size)
        self.checkpoint_, self.log_ = train(scenes, cfg)
        self.params_ = self.checkpoint_.build_params()
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **overrides) -> "NICEModel":
        c = ckpt.config
        m = c.model
        est = cls(m.channels, m.stride, m.embed_dim, m.vocab_size, m.layers, m.heads, m.tau, m.hidden,
                  m.ffn_residual, m.mode, m.barycenter, c.epochs, c.batch_size, c.lr, c.schedule, c.seed,
                  c.clip_norm, c.weights.bce, c.weights.dice, c.weights.smooth_l1, c.weights.giou,
                  c.loss.xi, c.loss.dice_eps)
        est.set_params(**overrides)
        est.checkpoint_ = ckpt
        est.log_ = []
        est.params_ = ckpt.build_params()
        return est

    def predict(self, X) -> list:
        check_is_fitted(self, "params_")
        cfg = self.train_config().model
        scenes = check_scenes(X, cfg.stride, cfg.vocab_size, allow_empty=True)
        return [predict_scene(self.params_, cfg, s, self.box_source) for s in scenes]

    def evaluate(self, X):
        check_is_fitted(self, "params_")
        cfg = self.train_config().model
        scenes = check_scenes(X, cfg.stride, cfg.vocab_size)
        return evaluate(self.params_, cfg, scenes, self.box_source)

    def score(self, X, y=None) -> float:
        """Mask Average Recall over all phrases."""
        return self.evaluate(X).ar_mask["all"]
