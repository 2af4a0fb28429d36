import os
import sys

os.environ.setdefault("CELLSEARCH_THREADS", "1")
sys.path.insert(0, os.path.dirname(__file__))
