"""scikit-learn style front end.

``DiffusionModel`` and ``PFDM`` follow the estimator protocol (constructor
stores hyperparameters only, ``fit`` returns ``self``, learned state ends in
an underscore) and add ``sample``.  ``ForwardDiffuser`` is the client-side
release step as a transformer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, validate_data

from ._rng import stream
from .denoiser import TrainingConfig, build_trainable_denoiser
from .diffusion import SampleBatch, make_linear_schedule, sample_ddpm, train_ddpm
from .federation import ClientState, pfdm_sample, run_federation
from .privacy import PrivacyQuery, account


def _seed(random_state):
    if random_state is None:
        return 0
    if isinstance(random_state, np.random.RandomState):
        return int(random_state.randint(2**31 - 1))
    return int(random_state)


def _check_shape(shape, n_features):
    if shape is None:
        return (n_features,)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != n_features:
        raise ValueError(f"sample_shape {shape} does not match {n_features} features")
    return shape


class _ScheduleMixin:
    def _schedule(self):
        return make_linear_schedule(self.n_steps, self.beta_start, self.beta_end, self.sigma_mode)


class ForwardDiffuser(_ScheduleMixin, TransformerMixin, BaseEstimator):
    """Diffuse every row once to step ``t0``.

    ``transform`` draws fresh noise on each call from a stream keyed by
    ``random_state`` and a call counter, so repeated calls never reuse noise.
    """

    def __init__(self, t0=100, n_steps=1000, beta_start=1e-4, beta_end=0.02, sigma_mode="beta", random_state=None):
        self.t0 = t0
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sigma_mode = sigma_mode
        self.random_state = random_state

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.non_deterministic = True
        return tags

    def fit(self, X, y=None):
        X = validate_data(self, X)
        self.schedule_ = self._schedule()
        self.schedule_.check_step(self.t0)
        self.alpha_bar_ = float(self.schedule_.alpha_bar(self.t0))
        self.calls_ = [0]
        return self

    def transform(self, X):
        check_is_fitted(self, "schedule_")
        X = validate_data(self, X, reset=False)
        rng = stream(_seed(self.random_state), "forward", self.calls_[0])
        self.calls_[0] += 1
        z = rng.standard_normal(X.shape)
        return np.sqrt(self.alpha_bar_) * X + np.sqrt(1.0 - self.alpha_bar_) * z

    def privacy_report(self, bound, delta=1e-5, mode="per_sample", group_size=1):
        check_is_fitted(self, "schedule_")
        return account(PrivacyQuery(self.t0, self.schedule_, bound, mode, delta, group_size))


class DiffusionModel(_ScheduleMixin, BaseEstimator):
    """DDPM with a small MLP noise predictor.

    ``fit(X, y)`` trains a class-conditional model when ``y`` is given.
    """

    def __init__(self, n_steps=1000, beta_start=1e-4, beta_end=0.02, sigma_mode="beta", t_max=None,
                 hidden=(256, 256), time_embedding="sinusoidal", time_dim=32, optimizer="adam",
                 learning_rate=1e-3, batch_size=128, max_iter=2000, grad_clip=1.0, sample_shape=None,
                 random_state=None):
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sigma_mode = sigma_mode
        self.t_max = t_max
        self.hidden = hidden
        self.time_embedding = time_embedding
        self.time_dim = time_dim
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.grad_clip = grad_clip
        self.sample_shape = sample_shape
        self.random_state = random_state

    def _training_config(self, conditional):
        return TrainingConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, n_steps=self.max_iter,
            seed=_seed(self.random_state), optimizer=self.optimizer, conditional=conditional,
            time_embedding=self.time_embedding, time_dim=self.time_dim, hidden=self.hidden,
            grad_clip=self.grad_clip,
        )

    def fit(self, X, y=None):
        if y is None:
            X = check_array(X)
        else:
            X, y = check_X_y(X, y)
            y = np.asarray(y, dtype=np.int64)
        self.schedule_ = self._schedule()
        t_max = self.schedule_.T if self.t_max is None else int(self.t_max)
        shape = _check_shape(self.sample_shape, X.shape[1])
        batch = SampleBatch(X, shape, y)
        n_labels = None if y is None else int(y.max()) + 1
        config = self._training_config(y is not None)
        den = build_trainable_denoiser(config, shape, self.schedule_.T, n_labels)
        run = train_ddpm(batch, t_max, self.schedule_, den, config)
        self.denoiser_ = run.denoiser
        self.loss_curve_ = run.losses
        self.n_features_in_ = X.shape[1]
        self.classes_ = None if y is None else np.arange(n_labels)
        return self

    def sample(self, n_samples=1, y=None, random_state=None):
        """Draw ``n_samples`` rows; ``y`` is one label or one per sample."""
        check_is_fitted(self, "denoiser_")
        if self.classes_ is not None and y is None:
            raise ValueError("model is conditional; pass y")
        seed = _seed(self.random_state if random_state is None else random_state)
        return sample_ddpm(self.denoiser_, self.schedule_, None, n_samples, y, seed=seed).data

    def score(self, X, y=None):
        """Negative noise-prediction loss on ``X`` averaged over all steps."""
        check_is_fitted(self, "denoiser_")
        X = check_array(X)
        rng = stream(_seed(self.random_state), "score")
        t = rng.integers(1, self.schedule_.T + 1, size=X.shape[0])
        z = rng.standard_normal(X.shape)
        ab = self.schedule_.alpha_bars[t - 1][:, None]
        xt = np.sqrt(ab) * X + np.sqrt(1 - ab) * z
        pred = self.denoiser_.predict(xt, t, None if y is None else np.asarray(y))
        return -float(np.mean(np.sum((z - pred) ** 2, axis=1)))


class PFDM(_ScheduleMixin, BaseEstimator):
    """Personalized federated diffusion model.

    ``fit(X, y, clients=...)`` simulates the protocol with one client per
    distinct value of ``clients``; ``sample(n, client=...)`` runs the split
    sampler for that client.
    """

    def __init__(self, t0=100, n_steps=1000, beta_start=1e-4, beta_end=0.02, sigma_mode="beta",
                 hidden=(256, 256), time_dim=32, optimizer="adam", learning_rate=1e-3, batch_size=128,
                 local_iter=2000, global_iter=4000, grad_clip=1.0, coefficient="sqrt_one_minus_beta",
                 sample_shape=None, random_state=None):
        self.t0 = t0
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sigma_mode = sigma_mode
        self.hidden = hidden
        self.time_dim = time_dim
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.local_iter = local_iter
        self.global_iter = global_iter
        self.grad_clip = grad_clip
        self.coefficient = coefficient
        self.sample_shape = sample_shape
        self.random_state = random_state

    def _config(self, steps, conditional, salt):
        return TrainingConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, n_steps=steps,
            seed=_seed(self.random_state) * 1000 + salt, optimizer=self.optimizer, conditional=conditional,
            time_dim=self.time_dim, hidden=self.hidden, grad_clip=self.grad_clip,
        )

    def fit(self, X, y=None, clients=None):
        if y is None:
            X = check_array(X)
        else:
            X, y = check_X_y(X, y)
            y = np.asarray(y, dtype=np.int64)
        if clients is None:
            clients = np.zeros(X.shape[0], dtype=np.int64)
        clients = np.asarray(clients)
        if clients.shape != (X.shape[0],):
            raise ValueError("clients must hold one id per row")
        self.schedule_ = self._schedule()
        if not 1 <= self.t0 <= self.schedule_.T:
            raise ValueError(f"t0 must lie in [1, {self.schedule_.T}]")
        shape = _check_shape(self.sample_shape, X.shape[1])
        self.clients_ = np.unique(clients)
        n_labels = None if y is None else int(y.max()) + 1
        states = []
        for cid in self.clients_:
            mask = clients == cid
            batch = SampleBatch(X[mask], shape, None if y is None else y[mask], int(cid))
            states.append(ClientState(int(cid), batch, self.t0, self.schedule_, seed=_seed(self.random_state) * 1000 + 10 + int(cid)))
        result = run_federation(states, self._config(self.local_iter, y is not None, 1),
                                self._config(self.global_iter, y is not None, 2), n_labels=n_labels)
        self.global_denoiser_ = result.global_denoiser
        self.local_denoisers_ = {c.client_id: c.denoiser for c in result.clients}
        self.audit_log_ = result.audit_log
        self.classes_ = None if y is None else np.arange(n_labels)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, n_samples=1, client=None, y=None, random_state=None, return_trajectory=False):
        check_is_fitted(self, "global_denoiser_")
        if client is None:
            if len(self.clients_) != 1:
                raise ValueError("several clients were fitted; pass client=")
            client = int(self.clients_[0])
        if self.classes_ is not None and y is None:
            raise ValueError("model is conditional; pass y")
        seed = _seed(self.random_state if random_state is None else random_state)
        traj = [] if return_trajectory else None
        out = pfdm_sample(self.global_denoiser_, self.local_denoisers_[client], self.schedule_, self.t0,
                          n_samples, y, seed=seed, coefficient=self.coefficient, trajectory=traj)
        return (out.data, traj) if return_trajectory else out.data

    def privacy_report(self, bound, delta=1e-5, mode="per_sample", group_size=1):
        schedule = self.schedule_ if hasattr(self, "schedule_") else self._schedule()
        return account(PrivacyQuery(self.t0, schedule, bound, mode, delta, group_size))
