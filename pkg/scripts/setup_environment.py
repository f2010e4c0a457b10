#!/usr/bin/env python3
"""
renoscan 環境セットアップスクリプト

作業ディレクトリの作成、依存関係とパッケージのインストール、
ユーザー設定ファイルの作成を行います。
"""

import json
import subprocess
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).parent.parent


def check_python_version():
    """Python バージョンをチェック"""
    if sys.version_info < (3, 10):
        print("エラー: Python 3.10 以上が必要です")
        print(f"現在のバージョン: {sys.version}")
        return False
    print(f"Python バージョン: {sys.version} ✓")
    return True


def create_directories():
    """必要なディレクトリを作成"""
    directories = [
        "data/phantoms",
        "data/weights",
        "results",
    ]
    for dir_path in directories:
        (PROJECT_ROOT / dir_path).mkdir(parents=True, exist_ok=True)
        print(f"ディレクトリ作成: {dir_path} ✓")


def pip_install(*args):
    try:
        subprocess.check_call([sys.executable, "-m", "pip", "install", *args])
        return True
    except subprocess.CalledProcessError as e:
        print(f"エラー: インストールに失敗しました: {e}")
        return False


def create_user_config():
    """ユーザー設定ファイルを作成（既存のファイルは上書きしない）"""
    user_config_file = PROJECT_ROOT / "config" / "user_settings.json"
    if user_config_file.exists():
        print(f"ユーザー設定ファイルは既に存在します: {user_config_file}")
        return
    user_config = {
        "user_preferences": {
            "default_workspace": str(PROJECT_ROOT / "data"),
            "log_level": "INFO",
            "language": "ja",
        }
    }
    with open(user_config_file, "w", encoding="utf-8") as f:
        json.dump(user_config, f, indent=2, ensure_ascii=False)
    print(f"ユーザー設定ファイル作成: {user_config_file} ✓")


def main():
    """メイン関数"""
    print("=== renoscan 環境セットアップ ===\n")

    if not check_python_version():
        sys.exit(1)

    print("\nディレクトリ構造を作成中...")
    create_directories()

    print("\n依存関係をインストール中...")
    if not pip_install("-r", str(PROJECT_ROOT / "requirements.txt")):
        sys.exit(1)

    print("\nパッケージを開発モードでインストール中...")
    if not pip_install("-e", str(PROJECT_ROOT)):
        sys.exit(1)

    print("\n設定ファイルを作成中...")
    create_user_config()

    print("\n=== セットアップ完了 ===")
    print("合成データで動作を確認できます:")
    print("renoscan phantom-gen --out-dir data/phantoms")
    print("renoscan compare --manifest data/phantoms/manifest.csv --out-dir results --repeats 10")


if __name__ == "__main__":
    main()
