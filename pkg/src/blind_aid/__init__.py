"""視覚障がい者向けの CNN 物体認識エンジン"""

__version__ = "0.1.0"
