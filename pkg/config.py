import os
import logging
import sys
import uuid
from datetime import datetime
from dotenv import load_dotenv

# ==============================================================================
# Environment Variables
# ==============================================================================

# Load from .env if present; the process environment wins
load_dotenv()


class Config:
    """Configuration class containing all toolkit settings."""

    TOOL_NAME = "gqakit"
    TOOL_VERSION = "0.3.0"

    # Numeric Configuration
    PRECISION = os.getenv("GQAKIT_PRECISION", "f32")
    SUPPORTED_PRECISIONS = {
        'f32': 4,
        'f64': 8
    }

    # Checkpoint Container
    CHECKPOINT_MAGIC = b"GQAC"
    CHECKPOINT_VERSION = 1

    # Decoding
    DEFAULT_CAPACITY = 2048

    # Conversion
    DRIFT_SEED = 7919
    DRIFT_BATCH = 4
    DRIFT_SEQ_LEN = 16

    # Training
    BASE_STEPS = 2000
    LEARNING_RATE = 0.5
    BATCH_SIZE = 32  # fresh sequences drawn for every step
    MONITOR_BATCH = 32  # fixed sequences the loss trajectory is measured on
    SEQ_LEN = 16
    EVAL_SEED = 104729
    EVAL_BATCH = 128
    ALPHA_GRID = (0.0, 0.05, 0.10)
    LOG_EVERY_STEPS = 100
    LOSS_SPIKE_THRESHOLD = 0.5  # nats, single-step increase
    MAX_UPTRAIN_RETRIES = 2
    DEFAULT_TASK = "topic"
    TOPIC_COUNT = 4
    TOPIC_SHARPNESS = 2.0
    MARKOV_SHARPNESS = 3.0
    MARKOV_ORDER2_WEIGHT = 0.5  # second-order share of the transition logits
    COPY_OFFSET = 4

    # Bench Configuration
    BENCH_MIN_TRIALS = 5
    BENCH_NOISE_BAND = 0.15  # relative slack on median wall time ordering
    BENCH_PROMPT_SEED = 31337

    # Default hardware for the analytic model (per partition)
    HARDWARE_BANDWIDTH = 1.2e12  # bytes/s
    HARDWARE_PEAK_FLOPS = 2.75e14  # FLOP/s
    HARDWARE_PARTITIONS = 1

    # Auto-generated toy model, "--auto-model" syntax
    AUTO_MODEL = "H=8,dim=4,layers=2,vocab=64"

    # Logging Configuration
    LOG_LEVEL = os.getenv("GQAKIT_LOG_LEVEL", "INFO")
    LOG_DIRECTORY = "./logs/"

    # Report column schema
    REPORT_COLUMNS = [
        "groups",
        "kv_bytes",
        "weight_bytes",
        "flops",
        "pred_time_s",
        "wall_time_s_median",
        "trials"
    ]

    @classmethod
    def bytes_per_element(cls, precision=None):
        """
        Get element width for a precision tag.

        Args:
            precision (str): 'f32' or 'f64'; defaults to the configured precision

        Returns:
            int: Bytes per element
        """
        precision = precision or cls.PRECISION
        if precision not in cls.SUPPORTED_PRECISIONS:
            raise ValueError(f"Unsupported precision '{precision}', expected one of {sorted(cls.SUPPORTED_PRECISIONS)}")
        return cls.SUPPORTED_PRECISIONS[precision]

    @staticmethod
    def setup_logging(run_id=None, to_file=False):
        """Setup logging on stderr, plus a unique per-run file when requested."""
        run_id = run_id or str(uuid.uuid4())
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

        # stdout is reserved for primary results
        stream_handler = logging.StreamHandler(sys.stderr)
        stream_handler.setFormatter(formatter)
        handlers = [stream_handler]

        log_filename = None
        if to_file:
            os.makedirs(Config.LOG_DIRECTORY, exist_ok=True)
            timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S-%f")[:-3]
            log_filename = os.path.join(Config.LOG_DIRECTORY, f"{timestamp}_{run_id[:8]}_gqakit.log")
            file_handler = logging.FileHandler(log_filename)
            file_handler.setFormatter(formatter)
            handlers.append(file_handler)

        logging.root.handlers = handlers
        logging.root.setLevel(getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO))

        return log_filename

    @classmethod
    def validate_config(cls):
        """Validate that every setting is usable."""
        problems = []

        if cls.PRECISION not in cls.SUPPORTED_PRECISIONS:
            problems.append(f"GQAKIT_PRECISION={cls.PRECISION}")
        if cls.BENCH_MIN_TRIALS < 5:
            problems.append(f"BENCH_MIN_TRIALS={cls.BENCH_MIN_TRIALS}")
        if cls.DEFAULT_CAPACITY < 1:
            problems.append(f"DEFAULT_CAPACITY={cls.DEFAULT_CAPACITY}")
        if not all(0.0 <= a <= 1.0 for a in cls.ALPHA_GRID):
            problems.append(f"ALPHA_GRID={cls.ALPHA_GRID}")
        if min(cls.HARDWARE_BANDWIDTH, cls.HARDWARE_PEAK_FLOPS, cls.HARDWARE_PARTITIONS) <= 0:
            problems.append("HARDWARE_* must be strictly positive")

        if problems:
            raise ValueError(f"Invalid configuration: {', '.join(problems)}")

        return True
