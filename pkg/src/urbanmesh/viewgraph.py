"""Image similarity graph, overlapping community detection, merge scheduling.

Communities are found with a speaker-listener label propagation process:
every node keeps a memory of heard labels; each iteration every node speaks
its most frequent label to one random neighbour, listeners keep the most
frequent incoming label, and after the final iteration label probabilities
``P_i(l) = count_i(l) / |M_i|`` are thresholded into overlapping communities.
The merge schedule is a maximum-shared-image spanning tree (Kruskal on negated
weights) ordered leaf-to-base, the base being the minimum-height-tree center.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, MalformedHeaderError, ParseError


@dataclass
class SimilarityGraph:
    """Undirected weighted graph over image ids; edge present iff cosine >= tau."""

    nodes: list[int]
    edges: dict[tuple[int, int], float] = field(default_factory=dict)
    tau: float = 0.0

    def neighbors(self, node: int) -> list[int]:
        out = []
        for (a, b), _ in self.edges.items():
            if a == node:
                out.append(b)
            elif b == node:
                out.append(a)
        return sorted(out)

    def adjacency(self) -> dict[int, list[tuple[int, float]]]:
        adj: dict[int, list[tuple[int, float]]] = {n: [] for n in self.nodes}
        for (a, b), w in self.edges.items():
            adj[a].append((b, w))
            adj[b].append((a, w))
        for n in adj:
            adj[n].sort()
        return adj


@dataclass
class ClusterSet:
    """Overlapping communities plus the per-node label-probability table."""

    communities: dict[int, set[int]]
    probabilities: dict[int, dict[int, float]]

    def community_sizes(self) -> dict[int, int]:
        return {cid: len(m) for cid, m in self.communities.items()}

    def memberships(self, node: int) -> list[int]:
        return sorted(c for c, members in self.communities.items() if node in members)


@dataclass
class MergeSchedule:
    """Cluster-graph MST with a base cluster and a leaf-to-base merge order."""

    edges: dict[tuple[int, int], int]  # cluster-graph edge weights |Ci ^ Cj|
    mst_edges: list[tuple[int, int]]
    base: int
    merge_order: list[tuple[int, int]]  # (source cluster, target cluster)


def build_similarity_graph(descriptors: dict[int, np.ndarray], tau: float) -> SimilarityGraph:
    """Edge (i, j) iff cosine similarity of the two descriptors >= tau.

    Raises
    ------
    InvalidInputError
        On inconsistent dimensions or a zero-norm descriptor (names the id).
    """
    ids = sorted(descriptors)
    if not ids:
        return SimilarityGraph([], {}, tau)
    mat = []
    dim = None
    for i in ids:
        v = np.asarray(descriptors[i], dtype=np.float64).reshape(-1)
        if dim is None:
            dim = len(v)
        elif len(v) != dim:
            raise InvalidInputError(f"descriptor {i} has dimension {len(v)} != {dim}")
        n = np.linalg.norm(v)
        if n == 0:
            raise InvalidInputError(f"descriptor {i} has zero norm")
        mat.append(v / n)
    mat = np.stack(mat)
    sims = mat @ mat.T
    edges = {}
    for ii in range(len(ids)):
        for jj in range(ii + 1, len(ids)):
            if sims[ii, jj] >= tau:
                edges[(ids[ii], ids[jj])] = float(sims[ii, jj])
    return SimilarityGraph(ids, edges, tau)


def _most_frequent(counter: dict[int, int]) -> int:
    # ties broken by smallest label id
    best_label, best_count = None, -1
    for label in sorted(counter):
        c = counter[label]
        if c > best_count:
            best_label, best_count = label, c
    return best_label


def slpa_cluster(
    graph: SimilarityGraph,
    iterations: int = 50,
    membership_threshold: float = 0.3,
    min_overlap: int = 8,
    seed: int = 0,
) -> ClusterSet:
    """Detect overlapping communities; deterministic for a given seed.

    Isolated nodes become singleton communities. After thresholding,
    communities that are strict subsets of another are dropped, every node is
    guaranteed at least its most probable label, and cluster-graph-adjacent
    communities are topped up to share >= min_overlap images by copying their
    highest-similarity boundary images into both.
    """
    if not graph.nodes:
        raise InvalidInputError("slpa_cluster requires a nonempty graph")
    rng = np.random.default_rng(seed)
    nodes = list(graph.nodes)
    adj = graph.adjacency()
    memory: dict[int, dict[int, int]] = {n: {n: 1} for n in nodes}

    for _ in range(iterations):
        order = [nodes[k] for k in rng.permutation(len(nodes))]
        # every node speaks its most frequent label (ties: smallest id); each
        # listener keeps the most frequent incoming label, ties broken
        # uniformly at random; adoptions apply at the end of the iteration
        spoken = {n: _most_frequent(memory[n]) for n in nodes}
        adopted: dict[int, int] = {}
        for listener in order:
            nbrs = adj[listener]
            if not nbrs:
                continue
            incoming: dict[int, int] = {}
            for speaker, _w in nbrs:
                label = spoken[speaker]
                incoming[label] = incoming.get(label, 0) + 1
            top = max(incoming.values())
            tied = sorted(l for l, c in incoming.items() if c == top)
            adopted[listener] = (
                tied[int(rng.integers(len(tied)))] if len(tied) > 1 else tied[0]
            )
        for n, label in adopted.items():
            memory[n][label] = memory[n].get(label, 0) + 1

    probabilities: dict[int, dict[int, float]] = {}
    raw: dict[int, set[int]] = {}
    for n in nodes:
        total = sum(memory[n].values())
        probs = {l: c / total for l, c in memory[n].items()}
        probabilities[n] = probs
        kept = {l for l, p in probs.items() if p >= membership_threshold}
        if not kept:
            kept = {_most_frequent(memory[n])}
        for l in kept:
            raw.setdefault(l, set()).add(n)

    # drop duplicates and strict subsets
    labels = sorted(raw)
    dropped = set()
    for la, lb in itertools.combinations(labels, 2):
        if la in dropped or lb in dropped:
            continue
        A, B = raw[la], raw[lb]
        if A == B:
            dropped.add(lb)
        elif A < B:
            dropped.add(la)
        elif B < A:
            dropped.add(lb)
    communities = {l: set(raw[l]) for l in labels if l not in dropped}

    # re-home nodes whose every community was dropped (can happen via subsets)
    covered = set().union(*communities.values()) if communities else set()
    for n in nodes:
        if n not in covered:
            best = _most_frequent(memory[n])
            target = best if best in communities else min(communities)
            communities[target].add(n)

    _enforce_min_overlap(communities, graph, min_overlap)
    return ClusterSet(communities, probabilities)


def _enforce_min_overlap(
    communities: dict[int, set[int]], graph: SimilarityGraph, min_overlap: int
) -> None:
    """Top up every cluster-graph-adjacent pair to >= min_overlap shared images.

    Candidates are boundary nodes (nodes of one community with similarity
    edges into the other), copied into both communities best-similarity-first
    until the quota is met or candidates run out.
    """
    if min_overlap <= 1:
        return
    sims = graph.edges
    cids = sorted(communities)
    for ca, cb in itertools.combinations(cids, 2):
        A, B = communities[ca], communities[cb]
        shared = A & B
        if not shared:
            # disjoint pairs still count as adjacent when the similarity graph
            # links them: those are the merges the overlap quota exists for
            linked = any(
                ((min(u, v), max(u, v)) in sims)
                for u in A
                for v in B
            )
            if not linked:
                continue
        if len(shared) >= min_overlap:
            continue
        candidates = []
        for u in sorted(A | B):
            if u in shared:
                continue
            other = B if u in A else A
            best = -np.inf
            for v in sorted(other):
                w = sims.get((min(u, v), max(u, v)))
                if w is not None and w > best:
                    best = w
            if best > -np.inf:
                candidates.append((-best, u))
        candidates.sort()
        for _, u in candidates:
            if len(A & B) >= min_overlap:
                break
            A.add(u)
            B.add(u)


def merge_schedule(clusters: ClusterSet) -> MergeSchedule:
    """Maximum-shared-image spanning tree and a leaf-to-base merge order.

    The base is the minimum-height-tree center of the largest connected
    component ("larger" = more images, ties by smaller cluster id); components
    are scheduled independently and chained after the main component's order.
    """
    cids = sorted(clusters.communities)
    if not cids:
        raise InvalidInputError("merge_schedule requires at least one community")
    weights: dict[tuple[int, int], int] = {}
    for ca, cb in itertools.combinations(cids, 2):
        w = len(clusters.communities[ca] & clusters.communities[cb])
        if w > 0:
            weights[(ca, cb)] = w

    # Kruskal on negated weights = maximum-weight spanning forest
    parent = {c: c for c in cids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    mst: list[tuple[int, int]] = []
    for (ca, cb), w in sorted(weights.items(), key=lambda kv: (-kv[1], kv[0])):
        ra, rb = find(ca), find(cb)
        if ra != rb:
            parent[ra] = rb
            mst.append((ca, cb))

    # connected components of the spanning forest
    comp: dict[int, list[int]] = {}
    for c in cids:
        comp.setdefault(find(c), []).append(c)
    components = sorted(
        comp.values(),
        key=lambda members: (-sum(len(clusters.communities[c]) for c in members), members[0]),
    )

    tree_adj: dict[int, set[int]] = {c: set() for c in cids}
    for ca, cb in mst:
        tree_adj[ca].add(cb)
        tree_adj[cb].add(ca)

    def mht_center(members: list[int]) -> int:
        alive = set(members)
        degree = {c: len(tree_adj[c] & alive) for c in alive}
        while len(alive) > 2:
            leaves = sorted(c for c in alive if degree[c] <= 1)
            for leaf in leaves:
                alive.discard(leaf)
                for nb in tree_adj[leaf]:
                    if nb in alive:
                        degree[nb] -= 1
        # remaining node, or the larger of two (ties by smaller id)
        return min(alive, key=lambda c: (-len(clusters.communities[c]), c))

    merge_order: list[tuple[int, int]] = []
    global_base = None
    for members in components:
        member_set = set(members)
        base = mht_center(members)
        if global_base is None:
            global_base = base
        else:
            # disconnected component: its local base is concatenated onto the
            # global base at the end (no shared images, so no alignment)
            pass
        # BFS from base; merge deepest-first so children precede parents
        parent_of: dict[int, int] = {base: base}
        depth = {base: 0}
        frontier = [base]
        order = []
        while frontier:
            nxt = []
            for node in sorted(frontier):
                for nb in sorted(tree_adj[node]):
                    if nb in parent_of or nb not in member_set:
                        continue
                    parent_of[nb] = node
                    depth[nb] = depth[node] + 1
                    nxt.append(nb)
                    order.append(nb)
            frontier = nxt
        for node in sorted(order, key=lambda c: (-depth[c], c)):
            merge_order.append((node, parent_of[node]))
        if base != global_base:
            merge_order.append((base, global_base))

    return MergeSchedule(weights, mst, global_base, merge_order)


# --- text serialization ---------------------------------------------------------

_CLUSTER_MAGIC = "# urbanmesh clusters v1"
_SCHEDULE_MAGIC = "# urbanmesh schedule v1"


def write_clusters(clusters: ClusterSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(_CLUSTER_MAGIC + "\n")
        for cid in sorted(clusters.communities):
            members = " ".join(str(m) for m in sorted(clusters.communities[cid]))
            fh.write(f"community {cid} {members}\n")
        for node in sorted(clusters.probabilities):
            probs = clusters.probabilities[node]
            vals = " ".join(f"{l}:{probs[l]:.17g}" for l in sorted(probs))
            fh.write(f"probs {node} {vals}\n")


def read_clusters(path) -> ClusterSet:
    communities: dict[int, set[int]] = {}
    probabilities: dict[int, dict[int, float]] = {}
    with open(path) as fh:
        if fh.readline().rstrip("\n") != _CLUSTER_MAGIC:
            raise MalformedHeaderError(f"{path}: bad clusters magic")
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "community":
                    communities[int(parts[1])] = {int(x) for x in parts[2:]}
                elif parts[0] == "probs":
                    probabilities[int(parts[1])] = {
                        int(kv.split(":")[0]): float(kv.split(":")[1]) for kv in parts[2:]
                    }
                else:
                    raise ValueError(f"unknown record {parts[0]!r}")
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return ClusterSet(communities, probabilities)


def write_schedule(schedule: MergeSchedule, path) -> None:
    with open(path, "w") as fh:
        fh.write(_SCHEDULE_MAGIC + "\n")
        fh.write(f"base {schedule.base}\n")
        for (a, b), w in sorted(schedule.edges.items()):
            fh.write(f"edge {a} {b} {w}\n")
        for a, b in schedule.mst_edges:
            fh.write(f"mst {a} {b}\n")
        for src, dst in schedule.merge_order:
            fh.write(f"merge {src} {dst}\n")


def read_schedule(path) -> MergeSchedule:
    edges: dict[tuple[int, int], int] = {}
    mst: list[tuple[int, int]] = []
    order: list[tuple[int, int]] = []
    base = None
    with open(path) as fh:
        if fh.readline().rstrip("\n") != _SCHEDULE_MAGIC:
            raise MalformedHeaderError(f"{path}: bad schedule magic")
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "base":
                    base = int(parts[1])
                elif parts[0] == "edge":
                    edges[(int(parts[1]), int(parts[2]))] = int(parts[3])
                elif parts[0] == "mst":
                    mst.append((int(parts[1]), int(parts[2])))
                elif parts[0] == "merge":
                    order.append((int(parts[1]), int(parts[2])))
                else:
                    raise ValueError(f"unknown record {parts[0]!r}")
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if base is None:
        raise ParseError(f"{path}: missing base record")
    return MergeSchedule(edges, mst, base, order)
