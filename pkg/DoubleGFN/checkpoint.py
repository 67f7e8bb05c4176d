"""
チェックポイント保存・読み込み
マニフェスト (JSON) + リトルエンディアン float64 のバイナリペイロード
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from DoubleGFN.autodiff import AdamState
from DoubleGFN.constants import CHECKPOINT_FORMAT, ENCODING
from DoubleGFN.policy import PolicySet
from DoubleGFN.utils import ConfigHashMismatchError

logger = logging.getLogger(__name__)

_PAYLOAD_DTYPE = np.dtype('<f8')


@dataclass
class CheckpointData:
    """学習再開に必要な全状態"""
    step: int
    config_hash: str
    online: PolicySet
    target: Optional[PolicySet]
    target_last_update: int
    adam: AdamState
    rng_state: Dict[str, Any]
    metrics_state: Dict[str, Any]
    extra: Dict[str, Any] = field(default_factory=dict)


def checkpoint_paths(directory: Path, step: int):
    """(マニフェスト, ペイロード) のパス"""
    directory = Path(directory)
    return directory / f"step_{step}.json", directory / f"step_{step}.bin"


def latest_checkpoint(directory: Path) -> Optional[Path]:
    """最新ステップのマニフェスト"""
    directory = Path(directory)
    if not directory.exists():
        return None
    manifests = []
    for path in directory.glob('step_*.json'):
        try:
            manifests.append((int(path.stem.split('_', 1)[1]), path))
        except ValueError:
            continue
    if not manifests:
        return None
    return max(manifests)[1]


def _policy_meta(policy: PolicySet) -> Dict[str, Any]:
    return {
        'dim': policy.dim,
        'side': policy.side,
        'hidden_dim': policy.hidden_dim,
        'num_layers': policy.num_layers,
        'leaky_slope': policy.leaky_slope,
        'with_log_flow': policy.with_log_flow,
        'uniform_pb': policy.uniform_pb,
    }


def save_checkpoint(directory: Path, data: CheckpointData) -> Path:
    """チェックポイントの保存（ペイロードを先に書き、マニフェストを置換で確定）"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path, payload_path = checkpoint_paths(directory, data.step)

    arrays: Dict[str, np.ndarray] = {}
    for name, value in data.online.params.items():
        arrays[f"online.{name}"] = value
    if data.target is not None:
        for name, value in data.target.params.items():
            arrays[f"target.{name}"] = value
    for name in data.adam.m:
        arrays[f"adam.m.{name}"] = data.adam.m[name]
        arrays[f"adam.v.{name}"] = data.adam.v[name]
    metrics_state = dict(data.metrics_state)
    arrays['metrics.window'] = np.asarray(metrics_state.pop('window'), dtype=np.float64)
    extra = dict(data.extra)
    for name, value in extra.pop('arrays', {}).items():
        arrays[f"extra.{name}"] = np.asarray(value, dtype=np.float64)

    entries = []
    offset = 0
    with open(payload_path, 'wb') as f:
        for name in sorted(arrays):
            value = np.ascontiguousarray(arrays[name], dtype=_PAYLOAD_DTYPE)
            f.write(value.tobytes())
            entries.append({'name': name, 'shape': list(value.shape), 'offset': offset})
            offset += value.nbytes

    manifest = {
        'format': CHECKPOINT_FORMAT,
        'step': data.step,
        'config_hash': data.config_hash,
        'payload': payload_path.name,
        'payload_bytes': offset,
        'arrays': entries,
        'policy': _policy_meta(data.online),
        'has_target': data.target is not None,
        'target_last_update': data.target_last_update,
        'adam': {
            'lr': data.adam.lr,
            'beta1': data.adam.beta1,
            'beta2': data.adam.beta2,
            'eps': data.adam.eps,
            'lr_overrides': data.adam.lr_overrides,
            't': data.adam.t,
        },
        'rng_state': data.rng_state,
        'metrics': metrics_state,
        'extra': extra,
    }
    temp_path = manifest_path.with_suffix('.json.tmp')
    with open(temp_path, 'w', encoding=ENCODING) as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    temp_path.replace(manifest_path)

    logger.info(f"チェックポイントを保存: {manifest_path}")
    return manifest_path


def load_checkpoint(manifest_path: Path, expected_hash: Optional[str] = None) -> CheckpointData:
    """チェックポイントの読み込み"""
    manifest_path = Path(manifest_path)
    with open(manifest_path, 'r', encoding=ENCODING) as f:
        manifest = json.load(f)

    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise ValueError(f"未対応のチェックポイント形式です: {manifest.get('format')}")
    if expected_hash is not None and manifest['config_hash'] != expected_hash:
        raise ConfigHashMismatchError(
            f"設定ハッシュが一致しません: {manifest['config_hash']} != {expected_hash}"
        )

    payload = (manifest_path.parent / manifest['payload']).read_bytes()
    if len(payload) != manifest['payload_bytes']:
        raise ValueError(f"ペイロードのサイズが不正です: {manifest_path}")

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest['arrays']:
        count = int(np.prod(entry['shape'], dtype=np.int64))
        flat = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE, count=count, offset=entry['offset'])
        arrays[entry['name']] = flat.astype(np.float64).reshape(entry['shape'])

    def collect(prefix: str) -> Dict[str, np.ndarray]:
        return {name[len(prefix):]: value for name, value in arrays.items() if name.startswith(prefix)}

    meta = manifest['policy']
    online = PolicySet(params=collect('online.'), **meta)
    target = PolicySet(params=collect('target.'), **meta) if manifest['has_target'] else None

    adam_meta = manifest['adam']
    adam = AdamState(
        lr=adam_meta['lr'], beta1=adam_meta['beta1'], beta2=adam_meta['beta2'], eps=adam_meta['eps'],
        lr_overrides=dict(adam_meta['lr_overrides']),
        m=collect('adam.m.'), v=collect('adam.v.'), t=int(adam_meta['t']),
    )

    metrics_state = dict(manifest['metrics'])
    metrics_state['window'] = arrays['metrics.window'].astype(np.int64)
    extra = dict(manifest['extra'])
    extra['arrays'] = collect('extra.')

    return CheckpointData(
        step=int(manifest['step']),
        config_hash=manifest['config_hash'],
        online=online,
        target=target,
        target_last_update=int(manifest['target_last_update']),
        adam=adam,
        rng_state=manifest['rng_state'],
        metrics_state=metrics_state,
        extra=extra,
    )
