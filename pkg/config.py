import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

class Config:
    # Output and runtime
    OUTPUT_ROOT = os.environ.get("GMC_OUTPUT_ROOT", "runs")
    LOG_LEVEL = os.environ.get("GMC_LOG_LEVEL", "INFO")
    DEFAULT_WORKERS = int(os.environ.get("GMC_WORKERS", "1"))

    # Optimizer (fixed learning rate, no schedule)
    LEARNING_RATE = 1e-3
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    BATCH_SIZE = 32
    EPOCHS = 10

    # Sinkhorn normalization
    SINKHORN_MAX_ITERS = 100
    SINKHORN_TOL = 1e-6

    # Consensus refinement
    NUM_ITERS_TRAIN = 10
    NUM_ITERS_TEST = 20
    RANDOM_INDICATOR_DIM = 32

    # Graduated assignment (softassign scale schedule)
    GA_INITIAL_SCALE = 1.0
    GA_SCALE_GROWTH = 1.075
    GA_ITERATIONS = 100
    GA_TOL = 1e-9

    # Network architecture
    HIDDEN_DIM = 32
    NUM_LAYERS = 3
    MLP_DEPTH = 2
    BATCH_NORM_MOMENTUM = 0.1
    BATCH_NORM_EPS = 1e-5

    # Synthetic data
    MAX_DEGREE = 16
    NUM_SOURCE_NODES = 50
    EDGE_PROB = 0.2

    # Checkpoints
    CHECKPOINT_FORMAT_VERSION = 1
    CHECKPOINT_FILENAME = "checkpoint.json"

    # Exhaustive oracles
    ORACLE_MAX_NODES = 8
