"""
Configuration settings for the photo-polarimetric height toolkit.
Contains directory paths, numeric defaults, and thresholds.
"""

from pathlib import Path

# === Directory Paths ===
PROJECT_ROOT = Path(__file__).parent.parent
DATA_DIR = PROJECT_ROOT / "data"
SCENES_DIR = DATA_DIR / "scenes"
RESULTS_DIR = DATA_DIR / "results"

# === Optics ===

# Typical dielectric; the refractive index is assumed known
DEFAULT_ETA = 1.5

# Viewer sits on the optical axis (orthographic camera)
DEFAULT_VIEWER = (0.0, 0.0, 1.0)

# Zenith cap wherever tan(theta) is formed (degrees)
MAX_ZENITH_DEG = 89.5

# Relative margin kept below rho_max when clamping before f(rho, eta)
RHO_MAX_MARGIN = 1e-9

# === Synthetic protocol ===
# Light sources s=[1,0,5], t=[-1,-2,7] (normalised when used),
# polariser stepped over [0, 180) in 10 degree increments,
# 8-bit quantisation after Gaussian noise and saturation.

PROTOCOL = {
    "size": 128,
    "amplitude": 20.0,          # gaussian peak height (pixels)
    "width_fraction": 0.25,     # gaussian width as a fraction of grid size
    "light_s": (1.0, 0.0, 5.0),
    "light_t": (-1.0, -2.0, 7.0),
    "polariser_step_deg": 10.0,
    "bit_depth": 8,
    "sigmas": (0.0, 0.005, 0.02),
    "uniform_albedo": 0.8,
    "checker_levels": (0.5, 0.9),
    "checker_size": 16,
    "channels": 3,
}

# === Decomposition ===

DECOMPOSITION = {
    "rho_clamp": 1.0 - 1e-6,        # rho stored in [0, rho_clamp]
    "min_intensity": 1e-4,          # fitted i_un below this leaves the domain
    "rel_tol": 1e-8,                # relative objective decrease stopping rule
    "max_iterations": 200,
    "rank_tol": 1e-10,              # smallest singular value of the design
    "noise_floor": 1e-9,            # pooled residual std below this (relative) counts as exact
    "debias_rho": True,             # subtract the noise floor from rho in quadrature
}

# === Constraint assembly ===

THRESHOLDS = {
    # rows whose inputs fall below these are excluded
    "min_intensity": 1e-4,
    "min_cos_zenith": 1e-3,
    # |det [s t v]| below this makes the phase-free system singular
    "coplanarity": 1e-8,
    # per-pixel 2x2 determinant below this counts as rank-deficient
    "rank_deficiency": 1e-12,
    # halfway vector third component must exceed this
    "min_halfway_z": 1e-6,
    # fraction of brightest pixels labelled specular on real data
    "specular_percentile": 98.0,
    # per-family row weights (rows are stacked unweighted by default)
    "row_weights": {
        "dop-ratio": 1.0,
        "intensity-ratio": 1.0,
        "phase": 1.0,
        "specular-normal": 1.0,
    },
    # scale each row by 1/std when the decomposition measured its noise
    "noise_weighting": True,
    # rho error grows to sqrt(1 + k^2) sigma as rho falls into the noise
    "low_snr_inflation": 2.0,
}

# Albedo assumed by albedo-dependent variants when no map is supplied
ASSUMED_UNIFORM_ALBEDO = 1.0

# === Height solver ===

SOLVER = {
    "stencil": "forward",           # or "central"
    "direct_max_pixels": 256 * 256,
    "cg_tol": 1e-10,
    "cg_max_iter_factor": 10,       # cap = factor * M
    "pivot_ratio": 1e-14,           # smallest / largest LU pivot below this is rank-deficient
    "max_optimality": 1e-6,         # max|A^T r| / max|A^T b| allowed after the solve
}

# Prop 1 -> albedo -> Prop 3 alternation
ALTERNATION = {
    "rel_tol": 1e-5,
    "max_iterations": 10,
}

# === Light estimation ===

LIGHT_ESTIMATION = {
    "restarts": 16,
    "max_theta_deg": 80.0,
    "max_pixels": 5000,
    "min_pixels": 100,
    "xatol": 1e-8,
    "fatol": 1e-14,
    "max_iterations": 4000,
    "min_ratio_norm": 1e-12,        # floor on |i1 t - i2 s| when normalising residuals
}

# === Albedo recovery ===

ALBEDO = {
    "lambda": 0.1,
    "min_shading": 1e-3,            # n.light below this is not a usable observation
}

# === Reporting ===

CSV_COLUMNS = ["setting", "method", "sigma", "height_rms", "normal_mae", "wall_ms"]
METHODS = ["srt16", "prop1", "prop2", "prop3", "prop13"]

# === Logging ===
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVEL = "INFO"
