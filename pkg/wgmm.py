import sys
import os
import logging

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)]
)

# Ensure we can import from src
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), 'src')))

try:
    from wgmm_tools.env_utils import load_project_env
    from pipeline_tools.commands import main
except ImportError as e:
    logging.critical(f"FATAL ERROR: Could not import wgmm_tools. Did you run 'pip install -r requirements.txt'? Details: {e}")
    sys.exit(1)

# Load environment variables from the project .env
load_project_env(__file__)

if __name__ == "__main__":
    sys.exit(main())
