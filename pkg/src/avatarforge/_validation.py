"""Input validation helpers shared by the estimators and functional API."""
import numpy as np
from sklearn.utils import check_array

from .exceptions import ContractError, DomainError

UNIT_TOL = 1e-6


def check_points(X, bound=None, name="points"):
    """Coerce ``X`` to a float ``(n, 3)`` array and optionally enforce the cube."""
    X = check_array(X, dtype=[np.float64, np.float32], ensure_2d=True,
                    ensure_min_samples=0, input_name=name)
    if X.shape[1] != 3:
        raise ContractError(f"{name} must have shape (n, 3), got {X.shape}")
    if bound is not None and X.size:
        bad = np.argwhere(np.abs(X) > bound + 1e-9)
        if len(bad):
            i, axis = bad[0]
            raise DomainError(
                f"{name}[{i}] coordinate {'xyz'[axis]}={X[i, axis]:.6g} lies outside "
                f"the modeling cube [-{bound}, {bound}]")
    return X


def check_unit_vector(v, name="direction", tol=UNIT_TOL):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ContractError(f"{name} must be a 3-vector, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ContractError(f"{name} must be unit norm within {tol}, got |v|={norms.max():.8g}")
    return v


def check_positive(value, name):
    if not value > 0:
        raise ContractError(f"{name} must be positive, got {value}")
    return value


def check_rotation(R, tol=UNIT_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ContractError("rotation must be a finite 3x3 matrix")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or np.linalg.det(R) < 0:
        raise ContractError("rotation is not a proper orthonormal matrix")
    return R


def check_image(img, name="image"):
    """Images are float arrays ``(H, W, 3)`` with values in [0, 1]."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"{name} must have shape (H, W, 3), got {img.shape}")
    return img
