"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

from grasens import tensor as T


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def gradcheck(build, arrays, rel=1e-4, h=1e-5, max_coords=None, seed=0):
    """Compare reverse-mode gradients of a scalar function against central
    finite differences.

    build takes one Tensor per entry of `arrays` and returns a scalar Tensor.
    Every coordinate is checked unless max_coords caps the per-array count
    (coordinates then sampled without replacement). Returns the worst
    relative error seen.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0

    def value_at(idx, coord, delta):
        mod = [a.copy() for a in arrays]
        mod[idx].reshape(-1)[coord] += delta
        ts = [T.Tensor(m) for m in mod]
        return float(build(*ts).data)

    for idx, (arr, t) in enumerate(zip(arrays, tensors)):
        grad = t.grad if t.grad is not None else np.zeros_like(arr)
        gflat = grad.reshape(-1)
        scale = max(np.abs(grad).max(initial=0.0), 1e-6)
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        for c in coords:
            c = int(c)
            num = (value_at(idx, c, h) - value_at(idx, c, -h)) / (2 * h)
            err = abs(num - gflat[c]) / max(abs(num), abs(gflat[c]), scale)
            worst = max(worst, err)
    assert worst < rel, f"gradient mismatch: worst relative error {worst:.3g} >= {rel}"
    return worst


def model_gradcheck(model, sample, label, rel=1e-3, h=1e-5,
                    max_coords_per_param=4, seed=0):
    """Finite-difference check of a model's parameter gradients against the
    cross-entropy loss on one sample. Large parameter tensors are probed at a
    random subset of coordinates. Returns the worst relative error."""
    from grasens import network

    def loss_value():
        return float(network.loss_fn(model.forward(sample), label).data)

    model.zero_grad()
    loss = network.loss_fn(model.forward(sample), label)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.parameters().items():
        if not p.requires_grad:
            continue
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        gflat = grad.reshape(-1)
        scale = max(np.abs(grad).max(initial=0.0), 1e-6)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for c in coords:
            c = int(c)
            orig = flat[c]
            flat[c] = orig + h
            fp = loss_value()
            flat[c] = orig - h
            fm = loss_value()
            flat[c] = orig
            num = (fp - fm) / (2 * h)
            err = abs(num - gflat[c]) / max(abs(num), abs(gflat[c]), scale)
            worst = max(worst, err)
    assert worst < rel, \
        f"model gradient mismatch: worst relative error {worst:.3g} >= {rel}"
    return worst
