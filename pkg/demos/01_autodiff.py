"""Reverse-mode gradients on a tiny graph, then a finite-difference check."""

import numpy as np

from speechqformer import tensor as T
from speechqformer.gradcheck import grad_check
from speechqformer.tensor import Tensor

rng = np.random.default_rng(0)

# %% a two-layer perceptron with a softmax cross-entropy head
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
labels = np.array([0, 1, 1, 0])


def loss_fn(w1, w2):
    h = T.gelu(T.matmul(x, w1))
    return T.cross_entropy(T.matmul(h, w2), labels)


loss = loss_fn(w1, w2)
loss.backward()
print("loss", loss.item())
print("dL/dw2\n", w2.grad)

# %% central differences agree with backprop (float64, eps 1e-5)
err = grad_check(loss_fn, [w1, w2])
print(f"max relative error {err:.2e}")

# %% broadcasting: a bias row gets the gradient summed over the batch
b = Tensor(np.zeros(2), requires_grad=True)
out = T.tsum(T.add(T.matmul(x, Tensor(w2.data[:3])), b))
out.backward()
print("bias grad", b.grad)  # each entry equals the batch size
