"""
AETomo Toolkit Configuration

Default settings for TomoSAR simulation, sparse inversion, AETomo-Net
training and point-cloud evaluation. JSON configs override these per run.
"""

TOOLKIT_VERSION = "1.0.0"

# Acquisition Geometry (X-band, spaceborne)
NUM_BASELINES = 24          # Uniformly distributed perpendicular baselines
BASELINE_MIN = -200.0       # Meters
BASELINE_MAX = 200.0        # Meters
WAVELENGTH = 0.031          # Meters (X-band)
REFERENCE_RANGE = 6.1434e5  # Scene-center slant range r0 in meters
INCIDENCE_DEG = 34.78       # Incidence angle of the reference track
REFERENCE_HEIGHT = 5.0456e5  # Reference track height in meters (metadata only)

# Elevation Discretization
ELEVATION_BINS = 128        # Must stay divisible by 8 for the conv path
ELEVATION_MIN = -50.0       # Meters
ELEVATION_MAX = 50.0        # Meters

# Scene Synthesis
MAX_SCATTERERS_PER_CELL = 3  # Sparsity cap K_max per range-azimuth cell
AZIMUTH_SPACING = 1.0        # Meters per azimuth cell
RANGE_SPACING = 1.0          # Meters per range cell
NOISE_SIGMA = 0.0            # Per-component std of the circular Gaussian noise

# Sparse Solvers ((F)ISTA)
REG_LAMBDA_FACTOR = 0.05     # Adaptive lambda = factor * ||R^H g||_inf per cell
MAX_ITERS = 2000
TOLERANCE = 1e-6             # Relative-change stopping threshold
POWER_ITERATION_TOL = 1e-6   # Relative tolerance for the Lipschitz estimate
POWER_ITERATION_MAX = 1000
DIVERGENCE_PATIENCE = 10     # Consecutive objective increases before abort

# AETomo-Net Architecture
NETWORK_VARIANT = 'aetomo'   # Options: 'aetomo', 'lista' (1D-only baseline)
BASE_CHANNELS = 16           # C0, doubled after each downsampling
PRE_BLOCKS = 16              # N1, pre-imaging LISTA blocks
FINAL_BLOCKS = 32            # N2, final-imaging LISTA blocks
THETA_INIT = 1e-2            # Initial shrinkage threshold of every LISTA block
SLICE_WIDTH = 100            # N_s, azimuth cells per azimuth-elevation slice
PAD_MULTIPLE = 8             # Three 2x2 poolings need divisibility by 8
NETWORK_SEED = 0

# Training (composite loss weights)
ALPHA = 0.6                  # Weight of the 2D-fusion term
BETA = 2.2                   # Weight of the final-imaging term
LAMBDA_SPARSE = 0.05         # Sparsity trade-off inside the final-imaging term
OPTIMIZER = 'adam'           # Options: 'adam', 'sgd'
LEARNING_RATE = 1e-3
LR_DECAY = 1.0               # Per-epoch multiplicative learning-rate decay
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
EPOCHS = 50
HOLDOUT_FRACTION = 0.2       # Share of slices kept out of training
CHECKPOINT_INTERVAL = 10     # Epochs between checkpoints (0 disables)
TRAIN_SEED = 0

# Evaluation
THRESHOLD_REL = 0.2          # Point extraction threshold relative to global max
TAU_BINS = 3.0               # Inlier/outlier cutoff in elevation bins
NN_METHOD = 'brute'          # Options: 'brute', 'kdtree'

# Command Line & Output
CONFIG_DIR_ENV = 'TOMO_CONFIG_DIR'  # Directory holding default JSON configs
DEFAULT_CONFIG_DIR = 'configs'
DEFAULT_THREADS = 1          # 1 keeps runs bit-reproducible
ARCHIVE_MAGIC = b'ATSR'
ARCHIVE_VERSION = 1
XYZ_SIGNIFICANT_DIGITS = 6
SHOW_PROGRESS = True         # tqdm progress bars for long loops
