"""
Training and tuning on a synthetic corpus
=========================================

Generate two ransomware-like clusters plus benign traffic, fit a centroid on
the training traces, then sweep the limit distance over held-out infections
and benign traffic and pick the threshold with the best Youden index.
"""

from pathlib import Path

from ransomwatch import SynthSpec, generate, train, tune

spec = SynthSpec.load(Path(__file__).resolve().parent.parent / "specs" / "small_demo.json")
corpus = generate(spec)
print({name: len(ids) for name, ids in corpus.splits.items()})

for family in ("locky", "cryptowall"):
    train_set = [t for t in corpus.split("train") if t.label == family]
    holdout = [t for t in corpus.split("holdout") if t.label == family]

    model = train(train_set, family).model
    print(f"\n{family}: centroid {tuple(round(c, 1) for c in model.centroid)}, "
          f"d_min_sq {model.d_min_sq:.0f}, d_max_sq {model.d_max_sq:.0f}")

    result = tune(model, holdout, corpus.split("benign"), steps=40)
    # a coarse look at the ROC curve
    for p in result.curve[::8]:
        print(f"  t={p.threshold_sq:10.1f}  tpr={p.tpr:.2f}  fpr_triples={p.fpr_triples:.4f}  fpr_domains={p.fpr_domains:.4f}")
    p = result.point
    print(f"  chosen d_limit_sq={result.threshold_sq:.1f} (tpr {p.tpr:.0%}, fpr_triples {p.fpr_triples:.2%}, "
          f"fpr_domains {p.fpr_domains:.2%})")
