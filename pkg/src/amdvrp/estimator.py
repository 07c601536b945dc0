"""scikit-learn style front end for the dynamic attention routing policy."""

import tempfile

import numpy as np
from sklearn.base import BaseEstimator

from . import checkpoint as ckpt
from .encoder import encode
from .instance import default_capacity
from .params import Architecture, ModelParams
from .rollout import GREEDY, ON_DEPOT_RETURN, check_mode, check_reencode, construct_many
from .trainer import TrainConfig, train
from .validation import check_fitted, check_instances


class DynamicAttentionRouter(BaseEstimator):
    """Learned construction heuristic for the capacitated VRP.

    ``fit`` runs REINFORCE on freshly generated instances; the instances passed
    to it only fix the problem size and capacity. ``predict`` returns one
    :class:`~amdvrp.instance.Solution` per instance and ``score`` the negated
    mean tour length (higher is better, as scikit-learn expects).

    Parameters
    ----------
    n_customers, capacity : int, optional
        Training problem size; inferred from ``X`` in ``fit`` when given.
    embed_dim, n_layers, n_heads, clip : model architecture.
    reencode : {"on_depot_return", "never"}
        ``"never"`` gives the static attention model.
    decode : {"greedy", "sample"}
        Selection rule used by ``predict``.
    """

    def __init__(self, n_customers=None, capacity=None, embed_dim=128, n_layers=3, n_heads=8,
                 clip=10.0, reencode=ON_DEPOT_RETURN, n_epochs=30, steps_per_epoch=10000,
                 batch_size=None, learning_rate=None, max_grad_norm=None, decode=GREEDY,
                 random_state=0, checkpoint_dir=None):
        self.n_customers = n_customers
        self.capacity = capacity
        self.embed_dim = embed_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.clip = clip
        self.reencode = reencode
        self.n_epochs = n_epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_grad_norm = max_grad_norm
        self.decode = decode
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir

    def _config(self, n, capacity, out_dir):
        return TrainConfig(
            n=n, capacity=capacity, epochs=self.n_epochs, steps_per_epoch=self.steps_per_epoch,
            batch_size=self.batch_size, lr=self.learning_rate, d_h=self.embed_dim,
            n_layers=self.n_layers, n_heads=self.n_heads, clip=self.clip,
            seed=self.random_state, reencode=self.reencode, checkpoint_dir=out_dir,
            metrics_path=f"{out_dir}/metrics.jsonl", max_grad_norm=self.max_grad_norm,
        )

    def fit(self, X=None, y=None):
        n, capacity = self.n_customers, self.capacity
        if X is not None:
            first = check_instances(X, capacity)[0]
            n = first.n if n is None else n
            capacity = first.capacity if capacity is None else capacity
        if n is None:
            raise ValueError("set n_customers or pass instances to fit")
        capacity = default_capacity(n) if capacity is None else capacity
        if self.checkpoint_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                result = train(self._config(n, capacity, tmp))
        else:
            result = train(self._config(n, capacity, self.checkpoint_dir))
        self.params_ = result.params
        self.history_ = result.metrics
        self.heldout_ = result.heldout
        self.n_features_in_ = 3
        return self

    def init_params(self):
        """Untrained (step-0) parameters, as ``fit`` would start from."""
        arch = Architecture(self.embed_dim, self.n_layers, self.n_heads, self.clip)
        self.params_ = ModelParams.initialize(arch, self.random_state)
        return self

    def load(self, path):
        self.params_ = ckpt.load(path)
        arch = self.params_.arch
        self.embed_dim, self.n_layers, self.n_heads, self.clip = (
            arch.d_h, arch.n_layers, arch.n_heads, arch.clip
        )
        return self

    def save(self, path):
        check_fitted(self)
        ckpt.save(path, self.params_)

    def rollout(self, X, seed=None):
        check_fitted(self)
        instances = check_instances(X, self.capacity)
        seed = self.random_state if seed is None else seed
        return construct_many(instances, self.params_, check_mode(self.decode),
                              check_reencode(self.reencode), seed)

    def predict(self, X):
        return [r.solution for r in self.rollout(X)]

    def predict_log_proba(self, X):
        return np.array([r.logprob for r in self.rollout(X)])

    def transform(self, X):
        """Initial node embeddings, one ``(n+1, embed_dim)`` array per instance."""
        check_fitted(self)
        return [encode(inst, None, self.params_, self.n_layers).H
                for inst in check_instances(X, self.capacity)]

    def score(self, X, y=None):
        return -float(np.mean([s.length for s in self.predict(X)]))
