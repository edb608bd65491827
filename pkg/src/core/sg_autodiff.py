# -*- coding: utf-8 -*-
"""
明示的な勾配を持つ最小限の数値計算コア

Features:
- Tensor: float64 配列 + 逆伝播用の親参照
- 演算: linear / matmul / add / relu / concat_cols / gather_rows / spmm / segment_max / scale
- 損失: cross_entropy / binary_cross_entropy（数値安定な定式化）
- ParamStore: 名前付きパラメータ、名前ごとのシード初期化、凍結
- Adam 最適化、中心差分による勾配チェック、JSONチェックポイント
"""

import json
import logging
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from sg_errors import CheckpointError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ssgcom-ckpt"
CHECKPOINT_VERSION = 1


class Tensor:
    """勾配付き配列"""

    def __init__(self, value: Any, requires_grad: bool = False, name: Optional[str] = None,
                 parents: Sequence["Tensor"] = (), backward: Optional[Callable[[np.ndarray], None]] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if self.requires_grad:
            self.grad += g

    def backward(self) -> None:
        """スカラーから逆伝播（トポロジカル順）"""
        if self.value.size != 1:
            raise ShapeError(f"backward はスカラーのみ対応しています: shape={self.shape}")
        if not self.requires_grad:
            return

        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def _result(value: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, parents=parents if needs else (),
                  backward=backward if needs else None)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# =============================================================================
# 演算
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul の形状不一致: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray) -> None:
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    return _result(a.value @ b.value, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """加算（b は a の形状にブロードキャスト可）"""
    try:
        value = a.value + b.value
    except ValueError as e:
        raise ShapeError(f"add の形状不一致: {a.shape} + {b.shape}") from e

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _result(value, (a, b), backward)


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = xW + b"""
    y = matmul(x, W)
    if b is None:
        return y
    if b.shape != (W.shape[1],):
        raise ShapeError(f"バイアスの形状不一致: {b.shape} (期待値 {(W.shape[1],)})")
    return add(y, b)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * mask)

    return _result(x.value * mask, (x,), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        x.accumulate(g * c)

    return _result(x.value * c, (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.value.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols の行数不一致: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p.accumulate(g[:, lo:hi])

    return _result(np.concatenate([p.value for p in parts], axis=1), tuple(parts), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            np.add.at(x.grad, index, g)

    return _result(x.value[index], (x,), backward)


def spmm(A: np.ndarray, x: Tensor) -> Tensor:
    """定数行列 A との積 A·x（集約・プーリング用）"""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm の形状不一致: {A.shape} @ {x.shape}")

    def backward(g: np.ndarray) -> None:
        x.accumulate(A.T @ g)

    return _result(A @ x.value, (x,), backward)


def segment_max(x: Tensor, segment: np.ndarray, n_segments: int) -> Tensor:
    """
    セグメントごとの列方向最大値（n_segments × d）

    要素のないセグメントは0。勾配は各列の最大値の行（同値なら先頭）にのみ流れる。
    """
    segment = np.asarray(segment, dtype=np.int64)
    if x.value.ndim != 2 or segment.shape != (x.shape[0],):
        raise ShapeError(f"segment_max の形状不一致: {x.shape} vs {segment.shape}")
    if segment.size and (segment.min() < 0 or segment.max() >= n_segments):
        raise ShapeError(f"セグメント番号が範囲外です (n_segments={n_segments})")
    d = x.shape[1]
    value = np.zeros((n_segments, d))
    winner = np.full((n_segments, d), -1, dtype=np.int64)
    for s in np.unique(segment):
        rows = np.nonzero(segment == s)[0]
        best = rows[x.value[rows].argmax(axis=0)]
        value[s] = x.value[best, np.arange(d)]
        winner[s] = best

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            filled = winner >= 0
            _, cols = np.nonzero(filled)
            np.add.at(x.grad, (winner[filled], cols), g[filled])

    return _result(value, (x,), backward)


def zeros_loss() -> Tensor:
    return Tensor(0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """数値安定なシグモイド（推論専用）"""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, targets: Any) -> Tensor:
    """平均交差エントロピー（logits は k 次元ベクトルまたは n×k 行列）"""
    z = logits.value if logits.value.ndim == 2 else logits.value.reshape(1, -1)
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, k = z.shape
    if n == 0:
        return zeros_loss()
    if k < 2:
        raise ShapeError(f"cross_entropy には2クラス以上が必要です: k={k}")
    if t.shape != (n,):
        raise ShapeError(f"ターゲット数が一致しません: {t.shape} vs {n}")
    if np.any(t < 0) or np.any(t >= k):
        raise ShapeError(f"ターゲットのクラス番号が範囲外です (k={k}): {t.tolist()}")

    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), t]))

    def backward(g: np.ndarray) -> None:
        probs = softmax(z)
        probs[np.arange(n), t] -= 1.0
        logits.accumulate((float(g) / n * probs).reshape(logits.shape))

    return _result(np.array(loss), (logits,), backward)


def binary_cross_entropy(logits: Tensor, targets: Any) -> Tensor:
    """平均BCE: max(z,0) - z·t + log(1 + exp(-|z|))"""
    z = logits.value.reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if z.size == 0:
        return zeros_loss()
    if t.shape != z.shape:
        raise ShapeError(f"ターゲット数が一致しません: {t.shape} vs {z.shape}")
    loss = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))

    def backward(g: np.ndarray) -> None:
        logits.accumulate((float(g) / z.size * (sigmoid(z) - t)).reshape(logits.shape))

    return _result(np.array(loss), (logits,), backward)


# =============================================================================
# パラメータ管理
# =============================================================================

def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ParamStore:
    """名前付きパラメータの集合（名前ごとに決定的な初期化）"""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: Dict[str, Tensor] = {}
        self.frozen: set = set()
        self._moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def add(self, name: str, shape: Tuple[int, ...], init: str = "xavier") -> Tensor:
        if name in self._params:
            raise ShapeError(f"パラメータ名が重複しています: {name}")
        if init == "xavier":
            fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
            a = xavier_bound(fan_in, fan_out)
            value = self._rng(name).uniform(-a, a, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            raise ShapeError(f"未知の初期化方式: {init}")
        tensor = Tensor(value, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def freeze(self, prefixes: Iterable[str]) -> List[str]:
        """接頭辞に一致するパラメータを凍結"""
        prefixes = tuple(prefixes)
        hit = [n for n in self._params if prefixes and n.startswith(prefixes)]
        self.frozen.update(hit)
        return hit

    def is_frozen(self, name: str) -> bool:
        return name in self.frozen

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def reset_optimizer(self) -> None:
        self._moments.clear()
        self.step_count = 0

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def restore(self, values: Dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self._params[name].value = value.copy()

    def load_values(self, values: Dict[str, np.ndarray], strict: bool = True) -> None:
        for name, value in values.items():
            if name not in self._params:
                if strict:
                    raise CheckpointError(f"未知のパラメータ: {name}")
                continue
            if self._params[name].shape != value.shape:
                raise CheckpointError(
                    f"パラメータ形状が一致しません: {name} {value.shape} vs {self._params[name].shape}")
            self._params[name].value = np.array(value, dtype=np.float64)
        if strict:
            missing = set(self._params) - set(values)
            if missing:
                raise CheckpointError(f"チェックポイントに無いパラメータ: {sorted(missing)}")


def adam_step(store: ParamStore, grads: Optional[Dict[str, np.ndarray]] = None, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Adam 更新（凍結パラメータは更新しない）"""
    if grads is None:
        grads = {n: p.grad for n, p in store.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"勾配に NaN/inf があります: {name}")

    store.step_count += 1
    t = store.step_count
    for name, p in store.items():
        g = grads.get(name)
        if g is None or store.is_frozen(name):
            continue
        m, v = store._moments.get(name, (np.zeros_like(p.value), np.zeros_like(p.value)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store._moments[name] = (m, v)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def grad_check(f: Callable[[], Tensor], store: ParamStore, h: float = 1e-5,
               names: Optional[Sequence[str]] = None) -> float:
    """
    中心差分による勾配チェック

    f はストアのパラメータを使ってスカラー損失を返す関数。
    戻り値は全座標での |解析 - 数値| / (|解析| + |数値| + 1e-12) の最大値。
    """
    names = list(names) if names is not None else store.names()
    store.zero_grad()
    f().backward()
    analytic = {n: store[n].grad.copy() for n in names}

    worst = 0.0
    for name in names:
        p = store[name]
        flat = p.value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(a_flat[i] - fd) / (abs(a_flat[i]) + abs(fd) + 1e-12)
            worst = max(worst, err)
    logger.debug(f"勾配チェック: {len(names)}パラメータ, 最大相対誤差 {worst:.3e}")
    return worst


# =============================================================================
# チェックポイント
# =============================================================================

@dataclass
class Checkpoint:
    """チェックポイント（パラメータ値 + メタ情報）"""
    seed: int
    catalog_hash: str
    params: Dict[str, np.ndarray]
    frozen: List[str] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)


def checkpoint_to_dict(store: ParamStore, catalog_hash: str, meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": store.seed,
        "catalog_hash": catalog_hash,
        "params": {
            name: {"shape": list(p.shape), "values": p.value.reshape(-1).tolist()}
            for name, p in store.items()
        },
        "frozen": sorted(store.frozen),
        "meta": meta or {},
    }


def save_checkpoint(store: ParamStore, path: str, catalog_hash: str,
                    meta: Optional[Dict[str, Any]] = None) -> None:
    data = checkpoint_to_dict(store, catalog_hash, meta)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, sort_keys=True)
        f.write("\n")
    logger.info(f"チェックポイント保存: {path} ({len(store)}パラメータ)")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"チェックポイントの形式エラー: {path}: {e}") from e

    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"チェックポイント形式ではありません: {path}")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"未対応のバージョン: {data.get('version')}")

    params = {}
    for name, entry in data["params"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"パラメータ {name} の要素数が形状と一致しません")
        params[name] = values.reshape(shape)
    return Checkpoint(
        seed=int(data["seed"]),
        catalog_hash=data["catalog_hash"],
        params=params,
        frozen=list(data.get("frozen", [])),
        meta=data.get("meta", {}),
    )
