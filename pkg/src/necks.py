"""Neck compute graphs: stacked Cross Fusion layers and the FPN+PANet baseline.

A ``NeckGraph`` is both executable (``forward``) and inspectable: the path
analysis counts fusion nodes between an entry stage and an exit stage.
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from .cross_fusion import (
    CfConfig,
    CfLayerWeights,
    ParamCount,
    StageSpec,
    cf_layer,
    conv_param_count,
    stage_sizes,
)
from .errors import GraphError, ShapeError
from .tensor_core import ConvLayer, Tensor, conv2d, elementwise_add, prelu, resize_to

logger = structlog.get_logger()

Module = Callable[[List[Tensor], bool], List[Tensor]]


@dataclass
class NeckNode:
    name: str
    kind: str
    fusion: bool
    module: Optional[Module] = None
    weights: Any = None
    n_outputs: int = 1

    def parameters(self) -> List[Tensor]:
        return [] if self.weights is None else self.weights.parameters()

    def param_count(self) -> ParamCount:
        if self.weights is None:
            return ParamCount()
        return self.weights.param_count()


@dataclass(frozen=True)
class Edge:
    src: str
    src_port: int
    dst: str


@dataclass
class NeckGraph:
    nodes: Dict[str, NeckNode] = field(default_factory=dict)
    edges: List[Edge] = field(default_factory=list)
    entries: List[str] = field(default_factory=list)
    exits: List[Tuple[str, int]] = field(default_factory=list)

    def add_node(self, node: NeckNode) -> NeckNode:
        if node.name in self.nodes:
            raise GraphError(f"duplicate node '{node.name}'")
        self.nodes[node.name] = node
        return node

    def add_entry(self, name: str) -> NeckNode:
        node = self.add_node(NeckNode(name, kind="entry", fusion=False))
        self.entries.append(name)
        return node

    def connect(self, src: str, dst: str, src_port: int = 0) -> None:
        for name in (src, dst):
            if name not in self.nodes:
                raise GraphError(f"unknown node '{name}'")
        if not 0 <= src_port < self.nodes[src].n_outputs:
            raise GraphError(f"node '{src}' has no output port {src_port}")
        self.edges.append(Edge(src, src_port, dst))

    def add_exit(self, name: str, port: int = 0) -> None:
        if name not in self.nodes:
            raise GraphError(f"unknown node '{name}'")
        self.exits.append((name, port))

    def inputs_of(self, name: str) -> List[Edge]:
        return [edge for edge in self.edges if edge.dst == name]

    def successors(self, name: str) -> List[str]:
        return [edge.dst for edge in self.edges if edge.src == name]

    def topological_order(self) -> List[str]:
        indegree = {name: 0 for name in self.nodes}
        for edge in self.edges:
            indegree[edge.dst] += 1
        ready = deque(name for name, degree in indegree.items() if degree == 0)
        order = []
        while ready:
            name = ready.popleft()
            order.append(name)
            for successor in self.successors(name):
                indegree[successor] -= 1
                if indegree[successor] == 0:
                    ready.append(successor)
        if len(order) != len(self.nodes):
            raise GraphError("neck graph contains a cycle")
        return order

    def validate(self) -> None:
        self.topological_order()
        reachable = set()
        frontier = deque(self.entries)
        while frontier:
            name = frontier.popleft()
            if name in reachable:
                continue
            reachable.add(name)
            frontier.extend(self.successors(name))
        unreachable = [name for name, _ in self.exits if name not in reachable]
        if unreachable:
            raise GraphError(f"exit nodes unreachable from any entry: {unreachable}")

    def fusion_nodes(self, kind: Optional[str] = None) -> List[NeckNode]:
        return [node for node in self.nodes.values() if node.fusion and (kind is None or node.kind == kind)]

    def parameters(self) -> List[Tensor]:
        return [p for node in self.nodes.values() for p in node.parameters()]

    def param_count(self) -> ParamCount:
        return sum((node.param_count() for node in self.nodes.values()), ParamCount())

    def forward(self, inputs: Sequence[Tensor], training: bool = True) -> List[Tensor]:
        if len(inputs) != len(self.entries):
            raise ShapeError(f"neck expects {len(self.entries)} input stages, got {len(inputs)}")
        values: Dict[Tuple[str, int], Tensor] = {}
        for name, x in zip(self.entries, inputs):
            values[(name, 0)] = x
        for name in self.topological_order():
            node = self.nodes[name]
            if node.kind == "entry":
                continue
            args = [values[(edge.src, edge.src_port)] for edge in self.inputs_of(name)]
            outputs = node.module(args, training)
            for port, y in enumerate(outputs):
                values[(name, port)] = y
        return [values[exit_] for exit_ in self.exits]


def build_cf_neck(config: CfConfig, seed: int = 0, rng: Optional[np.random.Generator] = None) -> NeckGraph:
    rng = rng if rng is not None else np.random.default_rng(seed)
    graph = NeckGraph()
    for index in range(len(config.in_stages)):
        graph.add_entry(f"in{index + 1}")

    previous = list(graph.entries)
    previous_ports = [0] * len(previous)
    for index in range(config.n):
        weights = CfLayerWeights.create(rng, config, index)

        def module(args: List[Tensor], training: bool, weights: CfLayerWeights = weights) -> List[Tensor]:
            return cf_layer(args, config, weights, training=training)

        name = f"cf{index + 1}"
        graph.add_node(NeckNode(name, kind="cf_layer", fusion=True, module=module, weights=weights,
                                n_outputs=len(config.out_stages)))
        for src, port in zip(previous, previous_ports):
            graph.connect(src, name, src_port=port)
        previous = [name] * len(config.out_stages)
        previous_ports = list(range(len(config.out_stages)))

    for src, port in zip(previous, previous_ports):
        graph.add_exit(src, port)
    graph.validate()
    return graph


@dataclass
class ConvWeights:
    """A single conv, optionally followed by a per-channel PReLU."""
    conv: ConvLayer
    slope: Optional[Tensor] = None

    def parameters(self) -> List[Tensor]:
        return self.conv.parameters() + ([] if self.slope is None else [self.slope])

    def param_count(self) -> ParamCount:
        count = conv_param_count(self.conv)
        return count if self.slope is None else count + ParamCount(prelu=self.slope.size)


@dataclass
class FusionWeights:
    """Weights of one FPN top-down or PANet bottom-up node: a resampling conv, then a 3x3 conv and PReLU."""
    resample: ConvLayer
    smooth: ConvLayer
    slope: Tensor

    def parameters(self) -> List[Tensor]:
        return self.resample.parameters() + self.smooth.parameters() + [self.slope]

    def param_count(self) -> ParamCount:
        return conv_param_count(self.resample) + conv_param_count(self.smooth) + ParamCount(prelu=self.slope.size)


def _slope(channels: int) -> Tensor:
    return Tensor(np.full(channels, 0.25))


def _lateral_module(weights: ConvWeights) -> Module:
    def module(args: List[Tensor], training: bool) -> List[Tensor]:
        return [conv2d(args[0], weights.conv)]
    return module


def _top_down_module(weights: FusionWeights) -> Module:
    # T_i = PReLU(Conv3(L_i + Conv1(Up(T_{i+1}))))
    def module(args: List[Tensor], training: bool) -> List[Tensor]:
        lateral, coarser = args
        upsampled = resize_to(coarser, lateral.shape[2], lateral.shape[3])
        merged = elementwise_add(lateral, conv2d(upsampled, weights.resample))
        return [prelu(conv2d(merged, weights.smooth), weights.slope)]
    return module


def _bottom_up_module(weights: FusionWeights) -> Module:
    # N_{i+1} = PReLU(Conv3(DownConv(N_i) + T_{i+1}))
    def module(args: List[Tensor], training: bool) -> List[Tensor]:
        finer, top_down = args
        merged = elementwise_add(conv2d(finer, weights.resample), top_down)
        return [prelu(conv2d(merged, weights.smooth), weights.slope)]
    return module


def build_fpn_panet_neck(stages: Sequence[StageSpec], seed: int = 0,
                         rng: Optional[np.random.Generator] = None) -> NeckGraph:
    """FPN top-down pathway followed by a PANet bottom-up pathway over the same stages."""
    stages = list(stages)
    if not stages:
        raise ValueError("FPN+PANet needs at least one stage")
    scales = [stage.scale for stage in stages]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(f"stage scales must be strictly increasing, got {scales}")

    rng = rng if rng is not None else np.random.default_rng(seed)
    graph = NeckGraph()
    count = len(stages)
    for index in range(count):
        graph.add_entry(f"in{index + 1}")

    for index, stage in enumerate(stages):
        weights = ConvWeights(ConvLayer.create(rng, stage.channels, stage.channels, 1))
        name = f"lat{index + 1}"
        graph.add_node(NeckNode(name, kind="lateral", fusion=False, module=_lateral_module(weights), weights=weights))
        graph.connect(f"in{index + 1}", name)

    # top-down: the deepest stage passes its lateral straight through
    top_down = {count - 1: f"lat{count}"}
    for index in range(count - 2, -1, -1):
        stage, coarser = stages[index], stages[index + 1]
        weights = FusionWeights(
            resample=ConvLayer.create(rng, coarser.channels, stage.channels, 1),
            smooth=ConvLayer.create(rng, stage.channels, stage.channels, 3),
            slope=_slope(stage.channels),
        )
        name = f"td{index + 1}"
        graph.add_node(NeckNode(name, kind="top_down", fusion=True, module=_top_down_module(weights),
                                weights=weights))
        graph.connect(f"lat{index + 1}", name)
        graph.connect(top_down[index + 1], name)
        top_down[index] = name

    # bottom-up: the shallowest stage's top-down output is the first bottom-up output
    bottom_up = {0: top_down[0]}
    for index in range(1, count):
        stage, finer = stages[index], stages[index - 1]
        ratio = stage.scale // finer.scale
        weights = FusionWeights(
            resample=ConvLayer.create(rng, finer.channels, stage.channels, 3, stride=ratio, padding=1),
            smooth=ConvLayer.create(rng, stage.channels, stage.channels, 3),
            slope=_slope(stage.channels),
        )
        name = f"bu{index + 1}"
        graph.add_node(NeckNode(name, kind="bottom_up", fusion=True, module=_bottom_up_module(weights),
                                weights=weights))
        graph.connect(bottom_up[index - 1], name)
        graph.connect(top_down[index], name)
        bottom_up[index] = name

    for index in range(count):
        graph.add_exit(bottom_up[index])
    graph.validate()
    return graph


def path_length(graph: NeckGraph, from_stage: int, to_stage: int) -> int:
    """Fewest fusion nodes on any path from entry ``from_stage`` to exit ``to_stage`` (0-based)."""
    if not 0 <= from_stage < len(graph.entries):
        raise GraphError(f"no input stage {from_stage}")
    if not 0 <= to_stage < len(graph.exits):
        raise GraphError(f"no output stage {to_stage}")

    start = graph.entries[from_stage]
    target = graph.exits[to_stage][0]
    cost = {start: int(graph.nodes[start].fusion)}
    queue = deque([start])
    # 0-1 BFS: entering a fusion node costs 1, anything else 0
    while queue:
        name = queue.popleft()
        for successor in graph.successors(name):
            weight = int(graph.nodes[successor].fusion)
            candidate = cost[name] + weight
            if candidate < cost.get(successor, candidate + 1):
                cost[successor] = candidate
                if weight:
                    queue.append(successor)
                else:
                    queue.appendleft(successor)
    if target not in cost:
        raise GraphError(f"output stage {to_stage} is unreachable from input stage {from_stage}")
    return cost[target]


def path_length_matrix(graph: NeckGraph) -> List[List[int]]:
    return [[path_length(graph, s, t) for t in range(len(graph.exits))] for s in range(len(graph.entries))]


def neck_output_shapes(graph: NeckGraph, stages: Sequence[StageSpec], batch: int = 1,
                       base: Tuple[int, int] = (32, 32)) -> List[Tuple[int, ...]]:
    inputs = [
        Tensor.zeros((batch, stage.channels, base[0] // stage.scale, base[1] // stage.scale)) for stage in stages
    ]
    stage_sizes(inputs, stages)
    return [y.shape for y in graph.forward(inputs, training=True)]
