"""Road network model: links with BPR delay, OD pairs, loopless path sets and
their incidence matrices, plus the CSV loaders for the CLI."""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Link:
    """Directed arc with a BPR volume-delay function."""

    id: str
    from_node: str
    to_node: str
    free_flow_time: float
    capacity: float
    alpha: float = 0.15
    beta: float = 4.0

    def __post_init__(self):
        # node and link labels are compared as strings everywhere (CSV loaders
        # produce strings), so coerce here to keep programmatic nets consistent
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "from_node", str(self.from_node))
        object.__setattr__(self, "to_node", str(self.to_node))
        if self.free_flow_time <= 0:
            raise ValueError(f"link {self.id}: free_flow_time must be > 0")
        if self.capacity <= 0:
            raise ValueError(f"link {self.id}: capacity must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"link {self.id}: alpha and beta must be >= 0")
        if self.from_node == self.to_node:
            raise ValueError(f"link {self.id}: self-loop not allowed")


def bpr_cost(link, flow):
    """BPR travel time t0 * (1 + alpha * (x / cap)^beta); flow may be an array."""
    x = np.asarray(flow, dtype=float)
    if np.any(x < 0):
        raise ValueError(f"link {link.id}: negative flow")
    t = link.free_flow_time * (1.0 + link.alpha * (x / link.capacity) ** link.beta)
    return t if t.ndim else float(t)


def bpr_cost_derivative(link, flow):
    """dt/dx = t0 * alpha * beta * x^(beta-1) / cap^beta."""
    x = np.asarray(flow, dtype=float)
    if np.any(x < 0):
        raise ValueError(f"link {link.id}: negative flow")
    with np.errstate(invalid="ignore"):
        d = (
            link.free_flow_time
            * link.alpha
            * link.beta
            * x ** (link.beta - 1.0)
            / link.capacity**link.beta
        )
    d = np.where(np.asarray(x) == 0.0, 0.0 if link.beta > 1.0 else d, d)
    return d if d.ndim else float(d)


class Network:
    """Directed multigraph with a fixed OD-pair list.

    Link order (as given) fixes the link index space used by every incidence
    matrix and flow vector downstream. Every OD pair must be connected.
    """

    def __init__(self, links, od_pairs):
        links = tuple(links)
        if not links:
            raise ValueError("network has no links")
        ids = [l.id for l in links]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate link_id in network")
        od_pairs = tuple((str(r), str(s)) for r, s in od_pairs)
        if not od_pairs:
            raise ValueError("network has no od pairs")
        if len(set(od_pairs)) != len(od_pairs):
            raise ValueError("duplicate od pair")
        nodes = sorted({l.from_node for l in links} | {l.to_node for l in links})
        node_set = set(nodes)
        for r, s in od_pairs:
            if r == s:
                raise ValueError(f"od pair ({r},{s}): origin equals destination")
            if r not in node_set or s not in node_set:
                raise ValueError(f"od pair ({r},{s}): unknown node")
        self.links = links
        self.od_pairs = od_pairs
        self.nodes = tuple(nodes)
        self.link_index = {l.id: i for i, l in enumerate(links)}
        self._node_index = {n: i for i, n in enumerate(nodes)}
        self._adjacency = [[] for _ in nodes]
        for i, l in enumerate(links):
            self._adjacency[self._node_index[l.from_node]].append(
                (i, self._node_index[l.to_node])
            )
        self._check_connected()

    def _check_connected(self):
        # one BFS per distinct origin covers all its OD pairs
        by_origin = {}
        for r, s in self.od_pairs:
            by_origin.setdefault(r, set()).add(s)
        for r, dests in by_origin.items():
            seen = {self._node_index[r]}
            stack = [self._node_index[r]]
            while stack:
                u = stack.pop()
                for _, v in self._adjacency[u]:
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            for s in dests:
                if self._node_index[s] not in seen:
                    raise ValueError(f"od pair ({r},{s}) is not connected")

    @property
    def n_links(self):
        return len(self.links)

    @property
    def n_od(self):
        return len(self.od_pairs)

    def free_flow_costs(self):
        return np.array([l.free_flow_time for l in self.links])

    def link_costs(self, x):
        x = np.asarray(x, dtype=float)
        return np.array([bpr_cost(l, x[i]) for i, l in enumerate(self.links)])

    def link_cost_derivatives(self, x):
        x = np.asarray(x, dtype=float)
        return np.array([bpr_cost_derivative(l, x[i]) for i, l in enumerate(self.links)])


@dataclass(frozen=True)
class ObservedLinks:
    """Indices of the sensor-equipped subset of links, in link-index order."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("observed link set is empty")
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate observed link")
        if sorted(idx) != list(idx):
            raise ValueError("observed links must be in ascending index order")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)


@dataclass
class PathSet:
    """Loopless paths grouped by OD pair, with the incidence machinery.

    paths       tuple of link-index tuples, OD-major order
    od_of_path  OD index of each path
    od_slices   per-OD slice into the path axis
    delta       link-path incidence, |A| x |K| sparse
    delta_obs   rows of delta for the observed links, |A^o| x |K|
    od_incidence path->OD aggregation M, |K_q| x |K| (column sums all 1)
    transition  B = M^T
    """

    paths: tuple
    od_of_path: np.ndarray
    od_slices: tuple
    delta: sp.csr_matrix
    delta_obs: sp.csr_matrix
    od_incidence: sp.csr_matrix
    transition: sp.csr_matrix
    observed: ObservedLinks | None = None
    costs_used: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self):
        return len(self.paths)

    @property
    def n_od(self):
        return len(self.od_slices)

    def paths_of(self, od):
        return self.od_slices[od]

    def observe(self, observed):
        """Return a copy restricted to the given observed links."""
        if max(observed.indices) >= self.delta.shape[0]:
            raise ValueError("observed link index out of range")
        d_obs = self.delta[list(observed.indices), :].tocsr()
        return replace(self, delta_obs=d_obs, observed=observed)


def build_incidence(net, paths_by_od, observed=None):
    """Assemble a PathSet from per-OD lists of link-index paths.

    Validates that each path actually connects its OD pair and is loopless.
    """
    if len(paths_by_od) != net.n_od:
        raise ValueError("paths_by_od must have one entry per od pair")
    paths = []
    od_of_path = []
    od_slices = []
    for oi, plist in enumerate(paths_by_od):
        if not plist:
            r, s = net.od_pairs[oi]
            raise ValueError(f"od pair ({r},{s}) has no paths")
        start = len(paths)
        for p in plist:
            p = tuple(int(a) for a in p)
            _validate_path(net, oi, p)
            paths.append(p)
            od_of_path.append(oi)
        od_slices.append(slice(start, len(paths)))
    n_k = len(paths)
    rows, cols = [], []
    for k, p in enumerate(paths):
        for a in p:
            rows.append(a)
            cols.append(k)
    delta = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(net.n_links, n_k)
    )
    od_of_path = np.asarray(od_of_path, dtype=int)
    m = sp.csr_matrix(
        (np.ones(n_k), (od_of_path, np.arange(n_k))), shape=(net.n_od, n_k)
    )
    ps = PathSet(
        paths=tuple(paths),
        od_of_path=od_of_path,
        od_slices=tuple(od_slices),
        delta=delta,
        delta_obs=delta,
        od_incidence=m,
        transition=m.T.tocsr(),
    )
    if observed is not None:
        ps = ps.observe(observed)
    return ps


def _validate_path(net, od_index, path):
    r, s = net.od_pairs[od_index]
    if not path:
        raise ValueError(f"od pair ({r},{s}): empty path")
    node = r
    seen = {node}
    for a in path:
        if a < 0 or a >= net.n_links:
            raise ValueError(f"od pair ({r},{s}): link index {a} out of range")
        l = net.links[a]
        if l.from_node != node:
            raise ValueError(f"od pair ({r},{s}): path is not contiguous")
        node = l.to_node
        if node in seen:
            raise ValueError(f"od pair ({r},{s}): path revisits node {node}")
        seen.add(node)
    if node != s:
        raise ValueError(f"od pair ({r},{s}): path does not end at destination")


def generate_paths(net, k, costs=None, observed=None):
    """Enumerate up to k loopless shortest paths per OD pair (Yen's algorithm)
    under fixed link costs and build the incidence matrices.

    Parameters
    ----------
    net : Network
    k : int
        Paths requested per OD pair; ODs with fewer simple paths get them all.
    costs : array of shape (n_links,), optional
        Fixed link costs; defaults to free-flow times. Must be nonnegative.
    observed : ObservedLinks, optional
        If given, delta_obs is restricted to these rows.

    Returns
    -------
    PathSet with paths in OD-major order, cost-ascending within OD, ties broken
    by the lexicographic link-id sequence.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    costs = net.free_flow_costs() if costs is None else np.asarray(costs, float)
    if costs.shape != (net.n_links,):
        raise ValueError("costs must have one entry per link")
    if np.any(costs < 0) or not np.all(np.isfinite(costs)):
        raise ValueError("link costs must be finite and nonnegative")
    node_index = net._node_index
    adj = net._adjacency
    radj = [[] for _ in net.nodes]
    for i, l in enumerate(net.links):
        radj[node_index[l.to_node]].append((i, node_index[l.from_node]))
    id_of = [l.id for l in net.links]
    heuristics = {}
    paths_by_od = []
    for r, s in net.od_pairs:
        t = node_index[s]
        if t not in heuristics:
            heuristics[t] = _dijkstra_all(radj, t, costs)
        h = heuristics[t]
        found = _yen(adj, node_index[r], t, k, costs, h)
        if not found:
            raise ValueError(f"od pair ({r},{s}) is not connected")
        keyed = sorted(
            found, key=lambda pc: (pc[1], tuple(id_of[a] for a in pc[0]))
        )
        paths_by_od.append([p for p, _ in keyed])
    ps = build_incidence(net, paths_by_od, observed=observed)
    ps.costs_used = costs
    return ps


def _dijkstra_all(adj, source, costs):
    """Distances from source to every node (used on the reversed graph to get
    exact distance-to-destination heuristics for the A* spur searches)."""
    n = len(adj)
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for a, v in adj[u]:
            nd = d + costs[a]
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def _astar(adj, source, target, costs, h, banned_nodes, banned_links):
    """Shortest loopless path source->target avoiding banned nodes/links.

    h is an exact lower bound from the unrestricted graph, so the search stays
    near the corridor even after Yen removes edges. Returns (links, cost) or None.
    """
    if not np.isfinite(h[source]):
        return None
    best = {source: 0.0}
    # entries: (f, g, node, parent_key); parents keyed by node
    heap = [(h[source], 0.0, source)]
    parent = {source: (-1, -1)}  # node -> (prev node, link)
    done = set()
    while heap:
        f, g, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == target:
            links = []
            v = u
            while parent[v][0] != -1:
                pv, a = parent[v]
                links.append(a)
                v = pv
            links.reverse()
            return links, g
        for a, v in adj[u]:
            if a in banned_links or v in banned_nodes or v in done:
                continue
            ng = g + costs[a]
            if ng < best.get(v, np.inf):
                best[v] = ng
                parent[v] = (u, a)
                if np.isfinite(h[v]):
                    heapq.heappush(heap, (ng + h[v], ng, v))
    return None


def _path_nodes(adj_links, source, links):
    nodes = [source]
    for a in links:
        nodes.append(adj_links[a])
    return nodes


def _yen(adj, source, target, k, costs, h):
    """Yen's k loopless shortest paths; returns [(link_seq, cost)]."""
    to_node = {}
    for u in range(len(adj)):
        for a, v in adj[u]:
            to_node[a] = v
    first = _astar(adj, source, target, costs, h, frozenset(), frozenset())
    if first is None:
        return []
    a_list = [first]
    candidates = []  # heap of (cost, link_seq tuple)
    seen = {tuple(first[0])}
    while len(a_list) < k:
        prev_links, _ = a_list[-1]
        prev_nodes = _path_nodes(to_node, source, prev_links)
        for i in range(len(prev_links)):
            spur_node = prev_nodes[i]
            root_links = prev_links[:i]
            root_cost = float(sum(costs[a] for a in root_links))
            banned_links = set()
            for pl, _ in a_list:
                if list(pl[:i]) == list(root_links) and len(pl) > i:
                    banned_links.add(pl[i])
            for _, cl in candidates:
                if list(cl[:i]) == list(root_links) and len(cl) > i:
                    banned_links.add(cl[i])
            banned_nodes = set(prev_nodes[:i])
            spur = _astar(
                adj, spur_node, target, costs, h,
                frozenset(banned_nodes), frozenset(banned_links),
            )
            if spur is None:
                continue
            cand = tuple(root_links) + tuple(spur[0])
            if cand in seen:
                continue
            seen.add(cand)
            heapq.heappush(candidates, (root_cost + spur[1], cand))
        if not candidates:
            break
        c, links = heapq.heappop(candidates)
        a_list.append((list(links), c))
    return [(list(p), c) for p, c in a_list]


def load_network(links_path, od_path):
    """Read a Network from the two CSV inputs.

    links CSV header: link_id,from_node,to_node,free_flow_time,capacity,alpha,beta
    od CSV header:    origin,destination
    """
    links = []
    for row, where in _read_csv(
        links_path,
        ["link_id", "from_node", "to_node", "free_flow_time", "capacity", "alpha", "beta"],
    ):
        links.append(
            Link(
                id=row["link_id"],
                from_node=row["from_node"],
                to_node=row["to_node"],
                free_flow_time=_parse_float(row, "free_flow_time", where),
                capacity=_parse_float(row, "capacity", where),
                alpha=_parse_float(row, "alpha", where),
                beta=_parse_float(row, "beta", where),
            )
        )
    od_pairs = []
    for row, where in _read_csv(od_path, ["origin", "destination"]):
        od_pairs.append((row["origin"], row["destination"]))
    return Network(links, od_pairs)


def load_observed_links(path, net):
    """Read the observed-link list (CSV with a link_id header) against net."""
    idx = []
    for row, where in _read_csv(path, ["link_id"]):
        lid = row["link_id"]
        if lid not in net.link_index:
            raise ValueError(f"{where}: unknown link_id {lid!r}")
        idx.append(net.link_index[lid])
    return ObservedLinks(tuple(sorted(idx)))


def _read_csv(path, required):
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise ValueError(f"cannot read {path}: {e}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for i, row in enumerate(reader, start=2):
            yield row, f"{path}:{i}"


def _parse_float(row, col, where):
    try:
        return float(row[col])
    except (TypeError, ValueError):
        raise ValueError(f"{where}: column {col} is not a number: {row[col]!r}") from None
