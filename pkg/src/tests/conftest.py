# -*- coding: utf-8 -*-
"""テスト共通設定（core / interfaces をインポートパスに追加）"""

import os
import sys

_HERE = os.path.dirname(os.path.abspath(__file__))
for _sub in (os.path.join("..", "core"), os.path.join("..", "interfaces"), ""):
    _path = os.path.normpath(os.path.join(_HERE, _sub))
    if _path not in sys.path:
        sys.path.insert(0, _path)
