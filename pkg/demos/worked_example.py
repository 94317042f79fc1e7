"""
A single triple against a single centroid
=========================================

Three POSTs of 910, 810 and 770 bytes to one server, checked against a
family centroid of (900, 800, 775) with a squared limit of 400.
"""

from ransomwatch import FamilyModel, FeatureTracker, PostEvent, classify, distance_sq

centroid = (900.0, 800.0, 775.0)
model = FamilyModel("locky", centroid, d_min_sq=0.0, d_max_sq=400.0, d_limit_sq=400.0, trained_on=1)

# squared distance stays in integer bytes^2; its square root is 15 bytes
print("distance_sq:", distance_sq([910, 810, 770], centroid))

# the tracker only emits a triple once a server has received three POSTs
tracker = FeatureTracker()
for t, size in enumerate([910, 810, 770]):
    triple = tracker.observe(PostEvent(float(t), "c2.example", size))
    print(f"POST {size:4d} -> triple {triple}")

verdict = classify(triple, [model], server_key="c2.example")
print("verdict:", "malicious" if verdict.malicious else "benign", verdict.family, verdict.distance_sq)

# the limit is strict: a triple exactly 400 away is benign
print("boundary:", classify([920, 800, 775], [model]).malicious)
