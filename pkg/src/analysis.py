"""Feature-space and neck-structure analyses: PCA cluster distances, path lengths and parameter tables."""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import structlog

from .cross_fusion import CfConfig
from .errors import ShapeError
from .necks import NeckGraph, build_cf_neck, build_fpn_panet_neck, path_length_matrix
from .tensor_core import Tensor
from .utils import write_csv

logger = structlog.get_logger()


@dataclass
class PcaResult:
    object_avg_dist: float
    background_avg_dist: float
    points: np.ndarray
    is_object: np.ndarray
    eigenvalues: np.ndarray


def project_top2(samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean-centres P x C samples and projects them onto the two leading covariance eigenvectors."""
    centered = samples - samples.mean(axis=0)
    scale = max(1.0, float(np.abs(samples).max(initial=0.0)))
    if float(np.abs(centered).max(initial=0.0)) <= 1e-12 * scale:
        return np.zeros((samples.shape[0], 2)), np.zeros(samples.shape[1])

    covariance = centered.T @ centered / max(samples.shape[0] - 1, 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, eigenvectors = eigenvalues[order], eigenvectors[:, order]
    return centered @ eigenvectors[:, :2], eigenvalues


def pca_cluster_distance(features: Union[np.ndarray, Tensor], object_mask: np.ndarray) -> PcaResult:
    features = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ShapeError(f"features must be C x H x W, got {features.shape}")
    channels, height, width = features.shape
    if channels < 2:
        raise ShapeError(f"PCA onto two components needs at least 2 channels, got {channels}")
    mask = np.asarray(object_mask).astype(bool)
    if mask.shape != (height, width):
        raise ShapeError(f"mask shape {mask.shape} does not match feature map {height}x{width}")

    is_object = mask.reshape(-1)
    if is_object.all() or not is_object.any():
        raise ValueError("the object mask must split pixels into two non-empty clusters")

    points, eigenvalues = project_top2(features.reshape(channels, -1).T)

    def average_distance(cluster: np.ndarray) -> float:
        centroid = cluster.mean(axis=0)
        return float(np.linalg.norm(cluster - centroid, axis=1).mean())

    result = PcaResult(
        object_avg_dist=average_distance(points[is_object]),
        background_avg_dist=average_distance(points[~is_object]),
        points=points,
        is_object=is_object,
        eigenvalues=eigenvalues,
    )
    logger.info("PCA cluster distances computed", object=result.object_avg_dist,
                background=result.background_avg_dist)
    return result


def write_projection_csv(result: PcaResult, path: Union[str, Path]) -> None:
    rows = [(float(p[0]), float(p[1]), int(flag)) for p, flag in zip(result.points, result.is_object)]
    write_csv(Path(path), ["pc1", "pc2", "is_object"], rows)


def goctconv_conv_weights(graph: NeckGraph) -> int:
    return sum(node.weights.goct.param_count().conv_weights for node in graph.fusion_nodes("cf_layer"))


def parameter_table(config: CfConfig, seed: int = 0) -> Dict[str, Any]:
    table: Dict[str, Any] = {}
    goct = {}
    for K in (1, 3):
        graph = build_cf_neck(config.with_kernel(K), seed=seed)
        table[f"cf_K{K}"] = graph.param_count().as_dict()
        goct[K] = goctconv_conv_weights(graph)
        table[f"cf_K{K}"]["goctconv_conv_weights"] = goct[K]
    table["fpn_panet"] = build_fpn_panet_neck(config.in_stages, seed=seed).param_count().as_dict()
    table["goctconv_k3_k1_ratio"] = goct[3] / goct[1]
    return table


def analyze_necks(config: CfConfig, seed: int = 0) -> Dict[str, Any]:
    """Path-length matrices and parameter counts of the CF neck and the FPN+PANet baseline."""
    cf = build_cf_neck(config, seed=seed)
    baseline = build_fpn_panet_neck(config.in_stages, seed=seed)
    cf_paths = path_length_matrix(cf)
    baseline_paths = path_length_matrix(baseline)

    report = {
        "config": {
            "in_channels": [s.channels for s in config.in_stages],
            "in_scales": [s.scale for s in config.in_stages],
            "out_channels": [s.channels for s in config.out_stages],
            "out_scales": [s.scale for s in config.out_stages],
            "n": config.n,
            "K": config.K,
        },
        "path_length": {
            "cf": cf_paths,
            "fpn_panet": baseline_paths,
            "cf_max": max(max(row) for row in cf_paths),
            "fpn_panet_max": max(max(row) for row in baseline_paths),
        },
        "parameters": parameter_table(config, seed=seed),
        "totals": {
            "cf": cf.param_count().total,
            "fpn_panet": baseline.param_count().total,
        },
    }
    logger.info("Neck analysis finished", cf_max_path=report["path_length"]["cf_max"],
                fpn_panet_max_path=report["path_length"]["fpn_panet_max"])
    return report
