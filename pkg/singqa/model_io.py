
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from singqa.bias import BRANCH_VERSION, BiasBranch
from singqa.errors import ModelFileError
from singqa.fusion import FusionModel
from singqa.heads import HeadConfig, PredictorHead

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _floats(values) -> list:
    """9 significant digits: enough to round-trip the float32 parameters exactly."""
    return [float(f'{v:.9g}') for v in np.asarray(values, dtype=np.float64).ravel()]


def _array(doc: dict, key: str, source: str) -> np.ndarray:
    try:
        return np.asarray([float(v) for v in doc[key]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f'{source}: bad or missing array {key!r}') from exc


def _scalar(doc: dict, key: str, source: str) -> float:
    try:
        return float(doc[key])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f'{source}: bad or missing value {key!r}') from exc


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_document(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f'Model file not found: {path}')
    try:
        doc = json.loads(path.read_text(encoding='utf8'))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFileError(f'{path}: not a model file ({exc})') from exc
    if not isinstance(doc, dict) or doc.get('format_version') != FORMAT_VERSION:
        raise ModelFileError(f'{path}: unsupported model format version {doc.get("format_version")!r}'
                             if isinstance(doc, dict) else f'{path}: not a model file')
    return doc


def _write_document(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + '\n', encoding='utf8')


def model_kind(path) -> str:
    return _read_document(path).get('kind', '')


def head_document(head: PredictorHead, branch: Optional[BiasBranch] = None) -> dict:
    cfg = head.config
    doc = {
        'format_version': FORMAT_VERSION,
        'kind': 'head',
        'variant': cfg.variant.value,
        'embedding_dim': cfg.embedding_dim,
        'aux_dim': cfg.aux_dim,
        'raw_aux_dim': cfg.raw_aux_dim,
        'use_layer_norm': cfg.use_layer_norm,
        'voicing_channel': cfg.voicing_channel,
        'histogram_norm': cfg.histogram_norm,
        'seed': cfg.seed,
        'weights': _floats(head.weights),
        'bias': _floats(head.bias)[0],
    }
    if head.projection is not None:
        doc['projection'] = {'shape': list(head.projection.shape), 'values': _floats(head.projection)}
    if head.norm_scale is not None:
        doc['norm_scale'] = _floats(head.norm_scale)
        doc['norm_offset'] = _floats(head.norm_offset)
    if branch is not None:
        doc['bias_correction'] = {
            'version': BRANCH_VERSION,
            'alpha': branch.alpha,
            'beta': branch.beta,
            'add_weights': _floats(branch.add_weights),
            'add_bias': _floats(branch.add_bias)[0],
            'sub_weights': _floats(branch.sub_weights),
            'sub_bias': _floats(branch.sub_bias)[0],
        }
    return doc


def save_head(path, head: PredictorHead, branch: Optional[BiasBranch] = None) -> None:
    _write_document(path, head_document(head, branch))
    logger.debug('Saved %r%s to %s', head, ' with bias branch' if branch is not None else '', path)


def head_from_document(doc: dict, source: str = '<model>') -> Tuple[PredictorHead, Optional[BiasBranch]]:
    if doc.get('kind') != 'head':
        raise ModelFileError(f'{source}: expected a head model, found {doc.get("kind")!r}')
    try:
        config = HeadConfig(
            variant=doc['variant'],
            embedding_dim=int(doc['embedding_dim']),
            aux_dim=int(doc['aux_dim']),
            raw_aux_dim=int(doc.get('raw_aux_dim', 0)),
            use_layer_norm=bool(doc.get('use_layer_norm', False)),
            voicing_channel=bool(doc.get('voicing_channel', True)),
            histogram_norm=str(doc.get('histogram_norm', 'voiced')),
            seed=int(doc.get('seed', 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f'{source}: bad head configuration ({exc})') from exc

    projection = None
    if 'projection' in doc:
        shape = tuple(int(s) for s in doc['projection'].get('shape', ()))
        values = _array(doc['projection'], 'values', source)
        if len(shape) != 2 or values.size != shape[0] * shape[1]:
            raise ModelFileError(f'{source}: projection shape {shape} does not match {values.size} values')
        projection = values.reshape(shape)

    norm_scale = norm_offset = None
    if 'norm_scale' in doc:
        norm_scale = _array(doc, 'norm_scale', source)
        norm_offset = _array(doc, 'norm_offset', source)

    try:
        head = PredictorHead(config=config, weights=_array(doc, 'weights', source), bias=[_scalar(doc, 'bias', source)],
                             projection=projection, norm_scale=norm_scale, norm_offset=norm_offset)
    except ValueError as exc:
        raise ModelFileError(f'{source}: {exc}') from exc

    branch = None
    section = doc.get('bias_correction')
    if section is not None:
        if section.get('version') != BRANCH_VERSION:
            raise ModelFileError(f'{source}: unsupported bias_correction version {section.get("version")!r}')
        try:
            branch = BiasBranch(
                alpha=_scalar(section, 'alpha', source),
                beta=_scalar(section, 'beta', source),
                add_weights=_array(section, 'add_weights', source),
                add_bias=[_scalar(section, 'add_bias', source)],
                sub_weights=_array(section, 'sub_weights', source),
                sub_bias=[_scalar(section, 'sub_bias', source)],
            )
        except ValueError as exc:
            raise ModelFileError(f'{source}: {exc}') from exc
        if branch.dim != config.feature_dim:
            raise ModelFileError(f'{source}: bias branch width {branch.dim} does not match head ({config.feature_dim})')
    return head, branch


def load_head(path) -> Tuple[PredictorHead, Optional[BiasBranch]]:
    return head_from_document(_read_document(path), source=str(path))


def save_fusion(path, model: FusionModel, member_paths: Dict[str, Path]) -> None:
    """Members are stored with their path (relative to the fusion file when possible) and a sha256 digest."""
    path = Path(path)
    base = path.resolve().parent
    members = []
    for member_id in model.member_ids:
        member_path = Path(member_paths[member_id]).resolve()
        try:
            stored = os.path.relpath(member_path, base)
        except ValueError:  # Different drive on Windows
            stored = str(member_path)
        members.append({'id': member_id, 'path': stored, 'sha256': file_digest(member_path)})

    doc = {
        'format_version': FORMAT_VERSION,
        'kind': 'fusion',
        'members': members,
        'combiner_weights': _floats(model.combiner_weights),
        'combiner_bias': _floats(model.combiner_bias)[0],
    }
    _write_document(path, doc)
    logger.debug('Saved %r to %s', model, path)


def load_fusion(path, verify: bool = True) -> Tuple[FusionModel, Dict[str, Path]]:
    """Load a fusion model and resolve its member files. With verify, a member whose current digest differs from the
    recorded one raises ModelFileError."""

    path = Path(path)
    doc = _read_document(path)
    source = str(path)
    if doc.get('kind') != 'fusion':
        raise ModelFileError(f'{source}: expected a fusion model, found {doc.get("kind")!r}')

    members = doc.get('members')
    if not isinstance(members, list) or not members:
        raise ModelFileError(f'{source}: fusion model lists no members')

    member_paths = {}
    for entry in members:
        try:
            member_id, stored, digest = str(entry['id']), Path(entry['path']), str(entry['sha256'])
        except (KeyError, TypeError) as exc:
            raise ModelFileError(f'{source}: malformed member entry {entry!r}') from exc
        member_path = stored if stored.is_absolute() else path.parent / stored
        if verify:
            if not member_path.is_file():
                raise ModelFileError(f'{source}: member {member_id!r} file {member_path} is missing')
            actual = file_digest(member_path)
            if actual != digest:
                raise ModelFileError(f'{source}: member {member_id!r} ({member_path}) changed since fusion '
                                     f'(digest {actual[:12]} != {digest[:12]})')
        member_paths[member_id] = member_path

    try:
        model = FusionModel(
            member_ids=list(member_paths),
            combiner_weights=_array(doc, 'combiner_weights', source),
            combiner_bias=[_scalar(doc, 'combiner_bias', source)],
        )
    except ValueError as exc:
        raise ModelFileError(f'{source}: {exc}') from exc
    return model, member_paths
