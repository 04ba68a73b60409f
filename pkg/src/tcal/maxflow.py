"""Exact s-t max-flow / min-cut on integer capacities (Dinic's algorithm).

Capacities are Python ints, so there is no overflow and no rounding. The
cut returned by :meth:`FlowNetwork.source_side` is the unique minimal
source set, which does not depend on arc order.
"""
from __future__ import annotations

from collections import deque


class FlowNetwork:
    def __init__(self, n: int):
        self.n = n
        self.adj: list[list[int]] = [[] for _ in range(n)]
        self.to: list[int] = []
        self.cap: list[int] = []

    def add_edge(self, u: int, v: int, cap: int, rev_cap: int = 0) -> None:
        if cap < 0 or rev_cap < 0:
            raise ValueError("capacities must be non-negative")
        self.adj[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(cap)
        self.adj[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(rev_cap)

    def _levels(self, s: int, t: int):
        level = [-1] * self.n
        level[s] = 0
        q = deque([s])
        to, cap, adj = self.to, self.cap, self.adj
        while q:
            u = q.popleft()
            lu = level[u] + 1
            for a in adj[u]:
                v = to[a]
                if cap[a] > 0 and level[v] < 0:
                    level[v] = lu
                    q.append(v)
        return level if level[t] >= 0 else None

    def max_flow(self, s: int, t: int) -> int:
        to, cap, adj = self.to, self.cap, self.adj
        flow = 0
        while True:
            level = self._levels(s, t)
            if level is None:
                return flow
            it = [0] * self.n
            # iterative blocking-flow DFS
            while True:
                path: list[int] = []
                u = s
                while u != t:
                    arcs = adj[u]
                    i = it[u]
                    lu = level[u] + 1
                    while i < len(arcs):
                        a = arcs[i]
                        if cap[a] > 0 and level[to[a]] == lu:
                            break
                        i += 1
                    it[u] = i
                    if i == len(arcs):
                        if u == s:
                            break
                        level[u] = -1       # dead end
                        a = path.pop()
                        u = to[a ^ 1]
                        it[u] += 1
                        continue
                    path.append(arcs[i])
                    u = to[arcs[i]]
                if u != t:
                    break
                push = min(cap[a] for a in path)
                for a in path:
                    cap[a] -= push
                    cap[a ^ 1] += push
                flow += push

    def source_side(self, s: int) -> list[bool]:
        """Nodes reachable from ``s`` in the residual network."""
        seen = [False] * self.n
        seen[s] = True
        stack = [s]
        to, cap, adj = self.to, self.cap, self.adj
        while stack:
            u = stack.pop()
            for a in adj[u]:
                v = to[a]
                if cap[a] > 0 and not seen[v]:
                    seen[v] = True
                    stack.append(v)
        return seen
