# A short walk through the numpy autodiff core the forecaster is built on.
# Run: python demos/01_autodiff_tour.py

# %%
import numpy as np

from adapformer import numkit as nk
from adapformer.numkit import AdamState, Tensor, adam_step

rng = np.random.default_rng(0)

# %% Tensors record the ops applied to them when any input needs a gradient.
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = rng.normal(size=(5, 4))                 # plain arrays are constants
h = nk.relu(nk.matmul(x, nk.transpose(w)))
loss = nk.mean(nk.square(h))
print("loss", float(loss.data), "op", loss.op)

grads = nk.backward(loss, [w])
print("dL/dw shape", grads[0].shape)

# %% Check against central differences.
eps = 1e-6
fd = np.zeros_like(w.data)
for idx in np.ndindex(w.shape):
    old = w.data[idx]
    w.data[idx] = old + eps
    up = float(nk.mean(nk.square(nk.relu(nk.matmul(x, nk.transpose(w))))).data)
    w.data[idx] = old - eps
    down = float(nk.mean(nk.square(nk.relu(nk.matmul(x, nk.transpose(w))))).data)
    w.data[idx] = old
    fd[idx] = (up - down) / (2 * eps)
print("max |analytic - numeric|", np.abs(fd - grads[0]).max())

# %% Every op broadcasts over leading axes, so one call handles a whole batch
# of (N, D) token matrices.
tokens = rng.normal(size=(8, 7, 16))        # 8 windows, 7 channels, width 16
normed = nk.standardize_rows(tokens)
print("row means ~0:", np.abs(normed.data.mean(-1)).max())
print("row stds  ~1:", np.abs(normed.data.std(-1) - 1).max())

# %% Adam with bias correction: the first step moves each coordinate by ~lr.
p = Tensor(np.array([1.0, -3.0]), requires_grad=True)
state = AdamState.for_params([p])
adam_step([p], [np.array([0.2, -50.0])], state, lr=0.1)
print("after one step", p.data)

# minimise x^2
q = Tensor(np.array([1.0]), requires_grad=True)
state = AdamState.for_params([q])
for _ in range(100):
    adam_step([q], [2 * q.data], state, lr=0.1)
print("x after 100 steps", q.data)
