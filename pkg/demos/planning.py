"""
Planning an epoch
=================

Every epoch the shard order is shuffled with a seeded generator, shards are
dealt round-robin to compute nodes, and each node's shards are cut into
batch ranges that are dealt round-robin to its worker threads.  Every sample
is read exactly once per epoch.
"""

import json

from emlio.planner import NodeSpec, plan, plan_coverage, plan_to_json
from emlio.recordfmt import RecordEntry, ShardIndex

# Index stand-ins: the planner only needs record counts.
sizes = {0: 100, 1: 64, 2: 37, 3: 128, 4: 5}
indexes = [ShardIndex(sid, f"shard_{sid}.tfrecord", tuple(RecordEntry(i * 32, 16, 0) for i in range(n)))
           for sid, n in sizes.items()]
nodes = [NodeSpec("gpu0", "10.0.0.10", 5555), NodeSpec("gpu1", "10.0.0.11", 5555)]

p = plan(indexes, nodes, B=32, E=2, T=2, seed=42)

for epoch in range(p.epochs):
    for node in nodes:
        for worker in range(p.threads_per_node):
            ranges = p.worker_ranges(epoch, node.node_id, worker)
            print(f"epoch {epoch} {node.node_id} w{worker}:",
                  " ".join(f"s{r.shard_id}[{r.first_entry}+{r.count}]" for r in ranges))

# The coverage check lists samples that are missing or read twice.
report = plan_coverage(p, indexes)
print("coverage problems:", "none" if report.empty else report)

# Plans serialize to JSON so senders and receivers can share them.
doc = plan_to_json(p)
print(json.dumps(doc)[:200], "...")
