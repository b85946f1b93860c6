# raw2raw/config.py
import os

from dotenv import load_dotenv

# A local .env is honoured; real environment variables win.
load_dotenv(override=False)


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name, "")
    try:
        return int(raw) if raw.strip() else default
    except ValueError:
        print(f"[BOOT] ignoring non-integer {name}={raw!r}")
        return default


# ---- Runtime ----
RAW2RAW_THREADS = _env_int("RAW2RAW_THREADS", 0)  # 0 = auto
RAW2RAW_SEED = _env_int("RAW2RAW_SEED", 0)
RAW2RAW_LOG_LEVEL = os.getenv("RAW2RAW_LOG_LEVEL", "WARNING").upper()

# ---- Container format ----
RGG4_MAGIC = b"RGG4"
RGG4_VERSION = 1

# ---- Noise profiling defaults ----
NOISE_PATCH_SIZE = 16
NOISE_GRADIENT_PERCENTILE = 0.20
NOISE_NUM_BINS = 100
NOISE_MIN_BIN_COUNT = 1
NOISE_GRADIENT_SOURCE = "others"  # "others" | "own"
MAD_TO_SIGMA = 1.4826

# ---- Metric defaults ----
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
KL_BINS = 256
KL_EPSILON = 1e-10

# ---- Pairing defaults ----
CROP_SIZE = 256
NMS_MIN_DIST = 128.0
RANSAC_THRESHOLD_PX = 2.0
RANSAC_MAX_ITERS = 2000
RANSAC_MIN_INLIERS = 12
RANSAC_CONFIDENCE = 0.999
MATCH_RATIO = 0.8
