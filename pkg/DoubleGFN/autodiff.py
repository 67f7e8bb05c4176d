"""
逆モード自動微分エンジン
小規模MLP（マスク付き log-softmax ヘッド）の学習に必要な演算のみを実装
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Callable, Tuple, Optional, Sequence, Any

import numpy as np

from DoubleGFN.constants import (
    MASK_LOGIT, DEFAULT_ADAM_BETA1, DEFAULT_ADAM_BETA2, DEFAULT_ADAM_EPS, DEFAULT_LR_POLICY,
)
from DoubleGFN.utils import NonFiniteError, UnsupportedPrimitiveError

logger = logging.getLogger(__name__)


class Tensor:
    """テープ上のノード（float64・行優先の配列）"""

    __slots__ = ('tape', 'index', 'data')

    def __init__(self, tape: 'GradientTape', index: int, data: np.ndarray):
        self.tape = tape
        self.index = index
        self.data = data

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    def item(self) -> float:
        """スカラー値の取得"""
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, index={self.index})"


@dataclass
class _Record:
    """テープ上の1演算"""
    op: str
    inputs: Tuple[int, ...]
    output: int
    ctx: Dict[str, Any] = field(default_factory=dict)


class GradientTape:
    """演算記録と逆伝播"""

    def __init__(self):
        self._values: List[np.ndarray] = []
        self._records: List[_Record] = []
        self._leaves: Dict[str, int] = {}

    # === ノード作成 ===

    def _new_node(self, data: np.ndarray) -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        self._values.append(data)
        return Tensor(self, len(self._values) - 1, data)

    def _emit(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, **ctx) -> Tensor:
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"演算 {op} の出力に NaN/Inf が含まれます")
        node = self._new_node(out)
        self._records.append(_Record(op, tuple(t.index for t in inputs), node.index, ctx))
        return node

    def watch(self, name: str, array: np.ndarray) -> Tensor:
        """学習パラメータ（葉ノード）の登録"""
        if name in self._leaves:
            raise ValueError(f"パラメータ {name} は登録済みです")
        node = self._new_node(np.array(array, dtype=np.float64, copy=True))
        self._leaves[name] = node.index
        return node

    def watch_all(self, params: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
        """パラメータ辞書をまとめて登録"""
        return {name: self.watch(name, value) for name, value in params.items()}

    def constant(self, array) -> Tensor:
        """定数ノード"""
        return self._new_node(np.array(array, dtype=np.float64, copy=True))

    # === 演算 ===

    def affine(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """x @ w + b"""
        if x.data.ndim != 2 or w.data.ndim != 2 or b.data.shape != (w.data.shape[1],):
            raise ValueError(f"affine の形状が不正です: {x.shape}, {w.shape}, {b.shape}")
        return self._emit('affine', (x, w, b), x.data @ w.data + b.data)

    def leaky_relu(self, x: Tensor, slope: float) -> Tensor:
        """LeakyReLU"""
        return self._emit('leaky_relu', (x,), np.where(x.data > 0, x.data, slope * x.data), slope=slope)

    def masked_log_softmax(self, logits: Tensor, mask: np.ndarray) -> Tensor:
        """行ごとのマスク付き log-softmax（マスク位置に大きな負の定数を加算）"""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.data.shape:
            raise ValueError(f"マスク形状が一致しません: {mask.shape} != {logits.data.shape}")
        out = masked_log_softmax_array(logits.data, mask)
        return self._emit('masked_log_softmax', (logits,), out)

    def gather(self, x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        """x[rows, cols] を1次元で取り出す"""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        return self._emit('gather', (x,), x.data[rows, cols], rows=rows, cols=cols)

    def take(self, x: Tensor, idx: np.ndarray) -> Tensor:
        """1次元テンソルの添字参照"""
        if x.data.ndim != 1:
            raise ValueError("take は1次元テンソルのみ対応です")
        idx = np.asarray(idx, dtype=np.int64)
        return self._emit('take', (x,), x.data[idx], idx=idx)

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        """1次元テンソルの連結"""
        if any(p.data.ndim != 1 for p in parts):
            raise ValueError("concat は1次元テンソルのみ対応です")
        sizes = [p.data.shape[0] for p in parts]
        return self._emit('concat', tuple(parts), np.concatenate([p.data for p in parts]), sizes=sizes)

    def segment_sum(self, x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
        """区間ごとの和"""
        segment_ids = np.asarray(segment_ids, dtype=np.int64)
        out = np.zeros(num_segments, dtype=np.float64)
        np.add.at(out, segment_ids, x.data)
        return self._emit('segment_sum', (x,), out, segment_ids=segment_ids)

    def cumsum(self, x: Tensor) -> Tensor:
        """1次元累積和"""
        return self._emit('cumsum', (x,), np.cumsum(x.data))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_same_shape('add', a, b)
        return self._emit('add', (a, b), a.data + b.data)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_same_shape('sub', a, b)
        return self._emit('sub', (a, b), a.data - b.data)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_same_shape('mul', a, b)
        return self._emit('mul', (a, b), a.data * b.data)

    def scale(self, x: Tensor, factor) -> Tensor:
        """定数倍（スカラーまたは同形状の定数配列）"""
        factor = np.asarray(factor, dtype=np.float64)
        if factor.ndim and factor.shape != x.data.shape:
            raise ValueError(f"scale の形状が一致しません: {factor.shape} != {x.data.shape}")
        return self._emit('scale', (x,), x.data * factor, factor=factor)

    def square(self, x: Tensor) -> Tensor:
        return self._emit('square', (x,), x.data * x.data)

    def sum(self, x: Tensor) -> Tensor:
        """全要素の和（スカラー）"""
        return self._emit('sum', (x,), np.array(x.data.sum()))

    @staticmethod
    def _check_same_shape(op: str, a: Tensor, b: Tensor):
        if a.data.shape != b.data.shape:
            raise ValueError(f"{op} の形状が一致しません: {a.shape} != {b.shape}")

    # === 逆伝播 ===

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """損失から全葉パラメータへの勾配を計算"""
        if loss.tape is not self:
            raise ValueError("損失が別のテープ上で作成されています")
        if loss.data.size != 1:
            raise ValueError(f"損失はスカラーである必要があります: shape={loss.shape}")

        grads: List[Optional[np.ndarray]] = [None] * len(self._values)
        grads[loss.index] = np.ones_like(loss.data)

        # 記録順はトポロジカル順なので逆順に1回ずつ処理
        for record in reversed(self._records):
            g_out = grads[record.output]
            if g_out is None:
                continue
            rule = _BACKWARD_RULES.get(record.op)
            if rule is None:
                raise UnsupportedPrimitiveError(f"未対応の演算です: {record.op}")
            inputs = [self._values[i] for i in record.inputs]
            for idx, g_in in zip(record.inputs, rule(record, g_out, inputs, self._values[record.output])):
                if g_in is None:
                    continue
                grads[idx] = g_in if grads[idx] is None else grads[idx] + g_in

        return {
            name: grads[idx] if grads[idx] is not None else np.zeros_like(self._values[idx])
            for name, idx in self._leaves.items()
        }


def masked_log_softmax_array(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """テープを使わないマスク付き log-softmax"""
    z = logits + np.where(mask, 0.0, MASK_LOGIT)
    z_max = z.max(axis=-1, keepdims=True)
    shifted = z - z_max
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# === 逆伝播規則 ===

def _affine_backward(record, g, inputs, out):
    x, w, _ = inputs
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _leaky_relu_backward(record, g, inputs, out):
    (x,) = inputs
    return (g * np.where(x > 0, 1.0, record.ctx['slope']),)


def _masked_log_softmax_backward(record, g, inputs, out):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _gather_backward(record, g, inputs, out):
    gx = np.zeros_like(inputs[0])
    np.add.at(gx, (record.ctx['rows'], record.ctx['cols']), g)
    return (gx,)


def _take_backward(record, g, inputs, out):
    gx = np.zeros_like(inputs[0])
    np.add.at(gx, record.ctx['idx'], g)
    return (gx,)


def _concat_backward(record, g, inputs, out):
    bounds = np.cumsum(record.ctx['sizes'])[:-1]
    return tuple(np.split(g, bounds))


def _segment_sum_backward(record, g, inputs, out):
    return (g[record.ctx['segment_ids']],)


def _cumsum_backward(record, g, inputs, out):
    return (np.cumsum(g[::-1])[::-1],)


def _mul_backward(record, g, inputs, out):
    a, b = inputs
    return g * b, g * a


_BACKWARD_RULES: Dict[str, Callable] = {
    'affine': _affine_backward,
    'leaky_relu': _leaky_relu_backward,
    'masked_log_softmax': _masked_log_softmax_backward,
    'gather': _gather_backward,
    'take': _take_backward,
    'concat': _concat_backward,
    'segment_sum': _segment_sum_backward,
    'cumsum': _cumsum_backward,
    'add': lambda record, g, inputs, out: (g, g),
    'sub': lambda record, g, inputs, out: (g, -g),
    'mul': _mul_backward,
    'scale': lambda record, g, inputs, out: (g * record.ctx['factor'],),
    'square': lambda record, g, inputs, out: (2.0 * inputs[0] * g,),
    'sum': lambda record, g, inputs, out: (np.full_like(inputs[0], float(g)),),
}


def backward(loss: Tensor, tape: GradientTape) -> Dict[str, np.ndarray]:
    """∂loss/∂p を全葉パラメータについて返す（非依存パラメータは0）"""
    return tape.backward(loss)


def grad_check(f: Callable[[GradientTape, Dict[str, Tensor]], Tensor],
               params: Dict[str, np.ndarray], eps: float = 1e-5, atol: float = 1e-4) -> float:
    """
    テープ勾配と中心差分の比較

    Args:
        f: (tape, 葉ノード辞書) -> スカラー損失 を返す決定的な関数
        params: パラメータ名 -> 配列
        eps: 差分幅（1e-7〜1e-4）
        atol: 相対誤差の分母の下限（勾配がほぼ0の成分用）
    Returns:
        float: 成分ごとの相対誤差の最大値
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps は [1e-7, 1e-4] の範囲で指定してください: {eps}")

    def evaluate(values: Dict[str, np.ndarray]) -> float:
        tape = GradientTape()
        return f(tape, tape.watch_all(values)).item()

    tape = GradientTape()
    analytic = tape.backward(f(tape, tape.watch_all(params)))

    worst = 0.0
    for name, value in params.items():
        flat = np.array(value, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            shifted = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
            plus = shifted[name].reshape(-1)
            plus[i] = flat[i] + eps
            f_plus = evaluate(shifted)
            plus[i] = flat[i] - eps
            f_minus = evaluate(shifted)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            denom = max(abs(a), abs(numeric), atol)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


@dataclass
class AdamState:
    """Adam の内部状態"""
    lr: float = DEFAULT_LR_POLICY
    beta1: float = DEFAULT_ADAM_BETA1
    beta2: float = DEFAULT_ADAM_BETA2
    eps: float = DEFAULT_ADAM_EPS
    lr_overrides: Dict[str, float] = field(default_factory=dict)
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def learning_rate(self, name: str) -> float:
        """パラメータごとの学習率"""
        return self.lr_overrides.get(name, self.lr)


def adam_step(params, grads: Dict[str, np.ndarray], state: AdamState, lr_scale: float = 1.0):
    """
    バイアス補正付き Adam 更新（パラメータはその場で更新）

    Args:
        params: PolicySet またはパラメータ名 -> 配列 の辞書
        grads: パラメータ名 -> 勾配
        state: AdamState
        lr_scale: 学習率の倍率（スケジュール用）
    Returns:
        (params, state)
    """
    arrays: Dict[str, np.ndarray] = getattr(params, 'params', params)

    for name, value in arrays.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"勾配の形状が一致しません: {name} {g.shape} != {value.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"パラメータ {name} の勾配に NaN/Inf が含まれます")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t

    for name, value in arrays.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)

        state.m[name] *= state.beta1
        state.m[name] += (1.0 - state.beta1) * g
        state.v[name] *= state.beta2
        state.v[name] += (1.0 - state.beta2) * (g * g)

        step_size = state.learning_rate(name) * lr_scale / bc1
        value -= step_size * state.m[name] / (np.sqrt(state.v[name] / bc2) + state.eps)

    return params, state
