"""How window detections from several views become one set of windows.

    python demos/fusion_walkthrough.py

Three aligned views of a facade each report a few boxes. Fusion drops
low-confidence boxes, groups boxes of the same category that overlap
(IoU above 0.3) into connected components, keeps groups seen at least
twice, and replaces each group by its median box. A group survives when the
mean square-root score is at least 0.4.
"""
from facade3d.fusion import Detection, FusionConfig, cluster_by_iou, fuse_multiview


def show(title, dets):
    print(title)
    for d in dets:
        x0, y0, x1, y1 = d.bbox
        print(f"  [{x0:6.1f} {y0:6.1f} {x1:6.1f} {y1:6.1f}]  score {d.score:.2f}  from {d.source_id}")


def main():
    views = [
        # a window seen by all three views, slightly displaced
        Detection((100, 50, 160, 125), 0.92, 1, "view0"),
        Detection((101, 49, 161, 124), 0.85, 1, "view1"),
        Detection((99, 51, 159, 126), 0.60, 1, "view2"),
        # a second window seen twice, one view with a weak score
        Detection((220, 50, 280, 125), 0.70, 1, "view0"),
        Detection((221, 51, 281, 126), 0.25, 1, "view2"),
        # clutter that only one view reports
        Detection((400, 300, 420, 330), 0.95, 1, "view1"),
        # below the confidence cut-off
        Detection((220, 200, 280, 275), 0.10, 1, "view1"),
    ]
    show("raw detections", views)

    cfg = FusionConfig()
    kept = [d for d in views if d.score >= cfg.tau_conf]
    groups = cluster_by_iou([d.bbox for d in kept], cfg.tau_iou)
    print(f"\n{len(kept)} boxes pass the {cfg.tau_conf} cut-off and form {len(groups)} overlap groups:")
    for g in groups:
        print(f"  {[kept[i].source_id for i in g]}")

    fused = fuse_multiview(views, cfg)
    show(f"\nfused windows (at least {cfg.n_min} views, merged score >= {cfg.tau_score2})", fused)


if __name__ == "__main__":
    main()
