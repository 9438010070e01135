import os
import sys

# ctest points this at the in-tree build of the extension.
_build = os.environ.get("ENDODEPTH_PYTHON_PATH")
if _build:
    sys.path.insert(0, _build)
