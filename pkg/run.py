#!/usr/bin/env python3
"""
Hop-token graph transformer: command-line runner.

Usage:
    python run.py synth-sbm --out-dir data/sbm
    python run.py preprocess --graph data/sbm/graph.txt --features data/sbm/features.csv \
        --k 4 --eig-s 4 --out sbm.nagt
    python run.py train --tokens sbm.nagt --labels data/sbm/labels.csv \
        --splits data/sbm/splits.txt --out-model sbm.nagm --report sbm.report
    python run.py evaluate --model sbm.nagm --tokens sbm.nagt \
        --labels data/sbm/labels.csv --splits data/sbm/splits.txt --split test
    python run.py gradcheck

Environment Variables:
    NAG_ENV        development | production | testing
    NAG_LOG_LEVEL  overrides the log level of the selected config
    NAG_*          option defaults, see .env.example
"""
import os
import sys
import logging

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from dotenv import load_dotenv
load_dotenv()

from src.config import get_config

# Setup logging first
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=os.environ.get('NAG_LOG_LEVEL', get_config().LOG_LEVEL),
    stream=sys.stderr
)

from src.cli import main

if __name__ == '__main__':
    sys.exit(main())
