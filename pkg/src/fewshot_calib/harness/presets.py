"""Named benchmark settings. Any key can still be overridden after the preset."""

SKEWED = dict(
    dataset="synthetic",
    dim=8,
    base_classes=20,
    novel_classes=20,
    cluster_spread=0.5,
    contamination=0.0,
    shift_offset=8.0,
    shift_anisotropy=3.0,
    lr=1e-3,
)

PRESETS = {
    # novel classes under a rotated, stretched and translated domain
    "skewed": SKEWED,
    # same domain with 20% of points strayed far from their class centre
    "strayed": {**SKEWED, "contamination": 0.2},
    # no shift, no contamination
    "clean": {**SKEWED, "shift_offset": 0.0, "shift_anisotropy": 1.0},
    # 2-way tasks on the two held-out digits with a 2-d feature space
    "mnist": dict(
        dataset="idx",
        hidden=(128, 32),
        feature_dim=2,
        base_labels=(0, 1, 2, 3, 4, 5, 6, 7),
        novel_labels=(8, 9),
        pretrain_lr=0.01,
        pretrain_epochs=5,
        pretrain_batch=128,
        ways=2,
        episodes=200,
        lr=1e-3,
    ),
}
