//! Prefix-sharing-maximizing order for the offline queue.
//!
//! Waiting offline requests live in two synchronized structures: a trie
//! over prompt segments whose DFS order co-locates requests with shared
//! prefixes, and a freshness index ordered by arrival. The scheduler pulls
//! the next candidate from the trie with probability `u` (the utility
//! ratio) and from the freshness index otherwise, trading cache reuse
//! against starvation-freedom.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scheduler::{PlanCtx, QueuedRequest, TryOutcome};
use crate::workload::{RequestId, SegmentId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PsmError {
    #[error("request {0} already present")]
    Duplicate(RequestId),
    #[error("request {0} not present")]
    Absent(RequestId),
}

#[derive(Debug, Clone)]
struct TrieNode {
    segment: SegmentId,
    tokens: u32,
    parent: usize,
    children: Vec<(SegmentId, usize)>, // first-insertion order
    requests: Vec<RequestId>,          // requests whose path ends here
    subtree_requests: usize,
}

/// Trie over prompt segment paths. Each waiting request sits at the node
/// its full path reaches; DFS order visits a node's own requests before its
/// children, children in first-insertion order of their edges.
///
/// The DFS order is materialized in a list that is regenerated when the
/// structure changes and lazily compacted as removals mark entries dead, so
/// taking the next request costs amortized O(1).
#[derive(Debug, Clone)]
pub struct PrefixTree {
    nodes: Vec<TrieNode>,
    locations: HashMap<RequestId, usize>,
    dfs: Vec<RequestId>,
    dead: HashSet<RequestId>,
    cursor: usize,
    dirty: bool,
    len: usize,
}

impl Default for PrefixTree {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefixTree {
    pub fn new() -> Self {
        PrefixTree {
            nodes: vec![TrieNode {
                segment: 0,
                tokens: 0,
                parent: usize::MAX,
                children: Vec::new(),
                requests: Vec::new(),
                subtree_requests: 0,
            }],
            locations: HashMap::new(),
            dfs: Vec::new(),
            dead: HashSet::new(),
            cursor: 0,
            dirty: false,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Live trie nodes, excluding the root (for size assertions).
    pub fn node_count(&self) -> usize {
        fn count(nodes: &[TrieNode], at: usize) -> usize {
            nodes[at]
                .children
                .iter()
                .map(|&(_, c)| 1 + count(nodes, c))
                .sum()
        }
        count(&self.nodes, 0)
    }

    pub fn insert(&mut self, id: RequestId, path: &[(SegmentId, u32)]) -> Result<(), PsmError> {
        if self.locations.contains_key(&id) {
            return Err(PsmError::Duplicate(id));
        }
        let mut at = 0usize;
        self.nodes[at].subtree_requests += 1;
        for &(seg, tokens) in path {
            let next = self.nodes[at]
                .children
                .iter()
                .find(|&&(s, _)| s == seg)
                .map(|&(_, n)| n);
            at = match next {
                Some(n) => n,
                None => {
                    let n = self.nodes.len();
                    self.nodes.push(TrieNode {
                        segment: seg,
                        tokens,
                        parent: at,
                        children: Vec::new(),
                        requests: Vec::new(),
                        subtree_requests: 0,
                    });
                    self.nodes[at].children.push((seg, n));
                    n
                }
            };
            self.nodes[at].subtree_requests += 1;
        }
        self.nodes[at].requests.push(id);
        self.locations.insert(id, at);
        self.len += 1;
        self.dirty = true;
        Ok(())
    }

    pub fn remove(&mut self, id: RequestId) -> Result<(), PsmError> {
        let mut at = self.locations.remove(&id).ok_or(PsmError::Absent(id))?;
        self.nodes[at].requests.retain(|&r| r != id);
        // walk up decrementing subtree counts, pruning emptied nodes
        loop {
            self.nodes[at].subtree_requests -= 1;
            let parent = self.nodes[at].parent;
            if at != 0 && self.nodes[at].subtree_requests == 0 {
                let seg = self.nodes[at].segment;
                self.nodes[parent].children.retain(|&(s, _)| s != seg);
            }
            if parent == usize::MAX {
                break;
            }
            at = parent;
        }
        self.len -= 1;
        if !self.dirty {
            self.dead.insert(id);
            if self.dead.len() * 2 > self.dfs.len() {
                self.rebuild();
            }
        }
        Ok(())
    }

    fn rebuild(&mut self) {
        self.dfs.clear();
        self.dead.clear();
        self.cursor = 0;
        // iterative DFS: own requests first, then children in edge order
        let mut stack = vec![0usize];
        while let Some(at) = stack.pop() {
            self.dfs.extend(self.nodes[at].requests.iter().copied());
            for &(_, child) in self.nodes[at].children.iter().rev() {
                stack.push(child);
            }
        }
        self.dirty = false;
    }

    fn ensure_fresh(&mut self) {
        if self.dirty {
            self.rebuild();
        }
        while self.cursor < self.dfs.len() && self.dead.contains(&self.dfs[self.cursor]) {
            self.cursor += 1;
        }
    }

    /// First live request in DFS order, without removing it.
    pub fn next_request_dfs(&mut self) -> Option<RequestId> {
        self.ensure_fresh();
        self.dfs.get(self.cursor).copied()
    }

    /// Live requests in DFS order (refreshes the order first).
    pub fn dfs_live(&mut self) -> impl Iterator<Item = RequestId> + '_ {
        self.ensure_fresh();
        self.dfs[self.cursor..]
            .iter()
            .copied()
            .filter(|id| !self.dead.contains(id))
    }

    fn next_excluding(&mut self, claimed: &HashSet<RequestId>) -> Option<RequestId> {
        self.dfs_live().find(|id| !claimed.contains(id))
    }

    /// DFS order computed by a direct read-only walk, bypassing the lazy
    /// list (reference/testing path).
    pub fn dfs_walk(&self) -> Vec<RequestId> {
        let mut out = Vec::with_capacity(self.len);
        let mut stack = vec![0usize];
        while let Some(at) = stack.pop() {
            out.extend(self.nodes[at].requests.iter().copied());
            for &(_, child) in self.nodes[at].children.iter().rev() {
                stack.push(child);
            }
        }
        out
    }

    /// Indented text dump with DFS indices, for debugging.
    pub fn dump(&mut self) -> String {
        self.ensure_fresh();
        let order: HashMap<RequestId, usize> = self
            .dfs_live()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect();
        let mut out = String::new();
        fn walk(
            nodes: &[TrieNode],
            at: usize,
            depth: usize,
            order: &HashMap<RequestId, usize>,
            out: &mut String,
        ) {
            if at != 0 {
                let n = &nodes[at];
                out.push_str(&"  ".repeat(depth - 1));
                out.push_str(&format!("seg {} ({} tok)", n.segment, n.tokens));
                let tags: Vec<String> = n
                    .requests
                    .iter()
                    .filter_map(|r| order.get(r).map(|i| format!("request {r} [dfs {i}]")))
                    .collect();
                if !tags.is_empty() {
                    out.push_str(&format!(" -> {}", tags.join(", ")));
                }
                out.push('\n');
            }
            for &(_, c) in &nodes[at].children {
                walk(nodes, c, depth + 1, order, out);
            }
        }
        walk(&self.nodes, 0, 0, &order, &mut out);
        out
    }
}

/// Arrival-ordered index over waiting offline requests, keyed by
/// `(arrival_ms, id)`, with a cached minimum for O(1) stalest lookup.
#[derive(Debug, Clone, Default)]
pub struct FreshnessIndex {
    set: BTreeSet<(u64, RequestId)>,
    oldest: Option<(u64, RequestId)>,
}

impl FreshnessIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn insert(&mut self, arrival_ms: u64, id: RequestId) -> Result<(), PsmError> {
        if !self.set.insert((arrival_ms, id)) {
            return Err(PsmError::Duplicate(id));
        }
        if self.oldest.is_none_or(|m| (arrival_ms, id) < m) {
            self.oldest = Some((arrival_ms, id));
        }
        Ok(())
    }

    pub fn remove(&mut self, arrival_ms: u64, id: RequestId) -> Result<(), PsmError> {
        if !self.set.remove(&(arrival_ms, id)) {
            return Err(PsmError::Absent(id));
        }
        if self.oldest == Some((arrival_ms, id)) {
            self.oldest = self.set.first().copied();
        }
        Ok(())
    }

    /// The stalest waiting request.
    pub fn oldest(&self) -> Option<RequestId> {
        self.oldest.map(|(_, id)| id)
    }

    fn oldest_excluding(&self, claimed: &HashSet<RequestId>) -> Option<RequestId> {
        match self.oldest {
            Some((_, id)) if !claimed.contains(&id) => Some(id),
            _ => self
                .set
                .iter()
                .map(|&(_, id)| id)
                .find(|id| !claimed.contains(id)),
        }
    }
}

/// The offline waiting set: trie + freshness index + request payloads,
/// kept in lockstep.
#[derive(Debug, Clone, Default)]
pub struct PsmQueue {
    pub tree: PrefixTree,
    pub index: FreshnessIndex,
    entries: HashMap<RequestId, QueuedRequest>,
}

impl PsmQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: RequestId) -> Option<&QueuedRequest> {
        self.entries.get(&id)
    }

    /// Iterate waiting offline requests (no particular order).
    pub fn iter(&self) -> impl Iterator<Item = &QueuedRequest> {
        self.entries.values()
    }

    pub fn insert(&mut self, q: QueuedRequest) -> Result<(), PsmError> {
        let id = q.request.id;
        self.tree.insert(id, &q.request.prompt_path)?;
        self.index.insert(q.request.arrival_ms, id)?;
        self.entries.insert(id, q);
        Ok(())
    }

    pub fn remove(&mut self, id: RequestId) -> Result<QueuedRequest, PsmError> {
        let q = self.entries.remove(&id).ok_or(PsmError::Absent(id))?;
        self.tree.remove(id)?;
        self.index.remove(q.request.arrival_ms, id)?;
        Ok(q)
    }

    /// Check the synchronization invariant: trie, index and payload map
    /// hold exactly the same request set.
    pub fn check_sync(&self) -> bool {
        self.tree.len() == self.entries.len() && self.index.len() == self.entries.len()
    }
}

/// Fair selection: with probability `u` the next request in trie DFS order,
/// otherwise the stalest request. One RNG draw per call.
pub fn next_request_fair(
    tree: &mut PrefixTree,
    index: &FreshnessIndex,
    utility_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Option<RequestId> {
    let x: f64 = rng.random();
    if x < utility_ratio {
        tree.next_request_dfs()
    } else {
        index.oldest()
    }
}

fn next_candidate(
    queue: &mut PsmQueue,
    utility_ratio: f64,
    claimed: &HashSet<RequestId>,
    rng: &mut ChaCha8Rng,
) -> Option<RequestId> {
    if queue
        .entries
        .keys()
        .all(|id| claimed.contains(id))
    {
        return None;
    }
    let x: f64 = rng.random();
    if x < utility_ratio {
        queue.tree.next_excluding(claimed)
    } else {
        queue.index.oldest_excluding(claimed)
    }
}

/// Offline-phase scheduling over the PSM order: first continue running
/// offline requests in their retained order (decodes gated by the latency
/// budget, prefill continuations by the solver), breaking on the first
/// failure; then pull new requests via fair selection, admitting while the
/// solver grants tokens and stopping at the first infeasible candidate.
pub fn psm_offline_schedule(
    ctx: &mut PlanCtx<'_>,
    running_offline: &[RequestId],
    queue: &mut PsmQueue,
    utility_ratio: f64,
    rng: &mut ChaCha8Rng,
) {
    'running: for &id in running_offline {
        if ctx.is_preempted(id) {
            continue;
        }
        let outcome = match ctx.running_phase(id) {
            Some(crate::engine::Phase::Decode) => ctx.try_decode(id),
            Some(crate::engine::Phase::Prefill) => ctx.try_prefill_running(id),
            None => continue,
        };
        if outcome != TryOutcome::Scheduled {
            break 'running;
        }
    }
    while let Some(id) = next_candidate(queue, utility_ratio, ctx.claimed(), rng) {
        let q = queue.get(id).expect("candidate present");
        if ctx.try_admit_queued(q) != TryOutcome::Scheduled {
            break;
        }
    }
}
