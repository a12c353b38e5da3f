"""How the retrieval protocol scores a ranked list, by hand.

For each query: sort the gallery by distance, drop junk entries and entries
sharing the query's identity AND camera, then walk the filtered list.
Average precision is the mean of precision-at-hit over the query's
positives; CMC@k asks whether any positive sits in the top k.
"""

import numpy as np

from stripereid.evaluation import evaluate

# one query (id 7, camera 1) against a six-item gallery
gallery_ids = np.array([7, -1, 3, 7, 7, 5])
gallery_cams = np.array([1, 2, 1, 2, 3, 1])
dist = np.array([[0.05, 0.10, 0.20, 0.30, 0.50, 0.40]])

print("gallery (sorted by distance):")
order = np.argsort(dist[0])
for rank, g in enumerate(order):
    why = ""
    if gallery_ids[g] < 0:
        why = "junk -> removed"
    elif gallery_ids[g] == 7 and gallery_cams[g] == 1:
        why = "same id + same camera -> removed"
    elif gallery_ids[g] == 7:
        why = "positive"
    print(f"  d={dist[0][g]:.2f} id={gallery_ids[g]:>2} cam={gallery_cams[g]} {why}")

# after filtering, the list is [id3, id7(c2), id5, id7(c3)]:
# hits at filtered ranks 2 and 4 -> AP = (1/2 + 2/4) / 2 = 0.5
report = evaluate(dist, [7], [1], gallery_ids, gallery_cams)
print(f"\nAP = {report.per_query_ap[0]:.4f} (hand: (1/2 + 2/4)/2 = 0.5)")
print(f"CMC@1 = {report.cmc[1]}, CMC@5 = {report.cmc[5]} "
      "(first hit at filtered rank 2)")

# the textbook example: positives at filtered ranks 1 and 3
report = evaluate(np.array([[0.1, 0.2, 0.3]]), [1], [1],
                  [1, 2, 1], [2, 1, 3])
print(f"\npositives at ranks 1 and 3: AP = {report.per_query_ap[0]:.4f} "
      "(hand: (1/1 + 2/3)/2 = 5/6 = 0.8333)")
