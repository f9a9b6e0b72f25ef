import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, '') else default


def _env_float(name: str, default: float) -> float:
    value = os.getenv(name)
    return float(value) if value not in (None, '') else default


# Build constants announced in the connection banner
PROTOCOL_NAME = "ddnfs/1"
DIGEST_ALGO = "sha256"
SIG_ALGO = "ed25519"

# Reserved document carrying membership and policy
PEERLIST_PATH = "/peerlist"
PEERLIST_HEADER = "ddnfs-peerlist v1"

# Replication engine knobs
FANOUT = _env_int('DDNFS_FANOUT', 3)
INITIAL_FANOUT = _env_int('DDNFS_INITIAL_FANOUT', 4)
RATE_CAPACITY = _env_int('DDNFS_RATE_CAPACITY', 10)
RATE_REFILL_PER_MIN = _env_float('DDNFS_RATE_REFILL_PER_MIN', 10.0)
SUSPECT_THRESHOLD = _env_int('DDNFS_SUSPECT_THRESHOLD', 10)
REQUEST_TIMEOUT = _env_float('DDNFS_REQUEST_TIMEOUT', 10.0)
ROUND_INTERVAL = _env_float('DDNFS_ROUND_INTERVAL', 2.0)
PROBE_ROUNDS = _env_int('DDNFS_PROBE_ROUNDS', 4)
MAX_DOCUMENTS = _env_int('DDNFS_MAX_DOCUMENTS', 0)  # 0 = unlimited

# Wire protocol limits
HEAD_CAP = _env_int('DDNFS_HEAD_CAP', 1000)
MAX_BODY = _env_int('DDNFS_MAX_BODY', 16 * 1024 * 1024)
MAX_HEADER = 8192

# Daemon
IDLE_TIMEOUT = _env_float('DDNFS_IDLE_TIMEOUT', 60.0)
TICK_SECONDS = _env_float('DDNFS_TICK_SECONDS', 1.0)
STORE_DIR = os.getenv('DDNFS_STORE_DIR', 'ddnfs_store')

# Logging
LOG_LEVEL = os.getenv('DDNFS_LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
