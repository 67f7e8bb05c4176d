"""
DoubleGFN パッケージ実行エントリーポイント
`python -m DoubleGFN` 実行時に呼び出される
"""

import sys

from DoubleGFN.main import main

if __name__ == '__main__':
    sys.exit(main())
