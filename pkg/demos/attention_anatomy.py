"""
Inside one score: relation memory and history attention
=======================================================

Scores a single user-item pair step by step. The joint embedding picks
attention weights over a bank of memory slices; those build item-item
relation vectors; the user's history attends over them to produce the
translation added to the user point before measuring distance.
"""

import numpy as np

from cmlrec import (
    ModelKind,
    RelationContext,
    init_parameters,
    item_item_relation,
    joint_embedding,
    key_attention,
    score,
)

store = init_parameters(num_users=6, num_items=10, dim=4, n_relations=3, seed=3)
user, item = 2, 7
history = np.array([1, 4, 5], dtype=np.int64)

# Step 1: a joint embedding for (history item, target item) addresses the
# key bank; softmax weights select a mix of memory slices.
s = joint_embedding(store.item_vecs[history[0]], store.item_vecs[item])
w = key_attention(s, store.rel_keys)
print("key attention for (history item 1, item 7):", np.round(w, 3), "sum", w.sum())

# Step 2: the weighted memory mix is the relation between those two items.
rel = item_item_relation(int(history[0]), item, store)
print("item-item relation vector:", np.round(rel, 3))

# Step 3: the full score attends over every history item's relation and
# translates the user before the squared distance.
ctx = RelationContext(user, item, history=history)
detail = score(ctx, ModelKind.HLR, store)
print("history attention:", np.round(detail.history_weights, 3))
print("aggregated relation:", np.round(detail.relation, 3))
print("distance with history:", round(detail.distance, 4))

# With no history there is nothing to attend over: the relation is zero
# and the score collapses to the plain metric-model distance.
empty = score(RelationContext(user, item), ModelKind.HLR, store)
plain = score(RelationContext(user, item), ModelKind.CML, store)
print("distance, empty history:", round(empty.distance, 4))
print("distance, plain model:  ", round(plain.distance, 4))
assert empty.distance == plain.distance
