"""
renoscan: 超音波腎臓画像による CAKUT 診断パイプライン

楕円フィッティングによる画像正規化、3 チャンネル特徴マップ、
HOG・幾何特徴・CNN 転移学習特徴、双対座標降下法による線形 SVM、
繰り返し交差検証による評価を提供します。
"""

__version__ = "0.1.0"
__author__ = "renoscan Development Team"
