"""Independent reference implementations used as test oracles.

Everything here is scalar, loop-based Python written from the written
rules, deliberately sharing no code with the package under test.
"""

from __future__ import annotations

import math

STRIDES = (8, 16, 32)
BINS = 16


# ---------------------------------------------------------------- geometry

def ref_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def ref_ciou(a, b):
    """Straight transcription: IoU - rho^2/c^2 - alpha*v."""
    u = ref_iou(a, b)
    acx, acy = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
    bcx, bcy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
    rho2 = (acx - bcx) ** 2 + (acy - bcy) ** 2
    cw = max(a[2], b[2]) - min(a[0], b[0])
    ch = max(a[3], b[3]) - min(a[1], b[1])
    c2 = cw * cw + ch * ch
    if c2 == 0:
        return u
    wa, ha = a[2] - a[0], a[3] - a[1]
    wb, hb = b[2] - b[0], b[3] - b[1]
    v = 4 / math.pi**2 * (math.atan2(wb, hb) - math.atan2(wa, ha)) ** 2
    alpha = v / ((1 - u) + v) if v > 0 else 0.0
    return u - rho2 / c2 - alpha * v


# ---------------------------------------------------------------- pyramid

def ref_anchors(height, width):
    """List of (cx, cy, stride), lv1 then lv2 then lv3, row-major."""
    out = []
    for s in STRIDES:
        for i in range(height // s):
            for j in range(width // s):
                out.append(((j + 0.5) * s, (i + 0.5) * s, s))
    return out


def ref_sigmoid(z):
    return 1 / (1 + math.exp(-z)) if z >= 0 else math.exp(z) / (1 + math.exp(z))


def ref_decode(reg_row, anchor):
    """``reg_row`` is 4 lists of 16 logits (l, t, r, b)."""
    cx, cy, s = anchor
    d = []
    for side in reg_row:
        m = max(side)
        e = [math.exp(v - m) for v in side]
        tot = sum(e)
        d.append(sum(k * e[k] for k in range(BINS)) / tot)
    return (cx - d[0] * s, cy - d[1] * s, cx + d[2] * s, cy + d[3] * s)


# ---------------------------------------------------------------- assignment

def ref_assign(anchors, cls_logits, reg_logits, truths, mode, top_k=10, dynamic_k=False,
               tal_alpha=0.5, tal_beta=6.0, simota_alpha=3.0, radius=2.5, soft=True):
    """Follow the written procedure literally.

    ``truths`` is a list of (box, class_list_multi_hot).  Returns
    (matched list with -1 for none, list of target vectors).
    """
    n = len(anchors)
    k_cls = len(cls_logits[0]) if n else 0
    boxes = [ref_decode(reg_logits[a], anchors[a]) for a in range(n)]
    probs = [[ref_sigmoid(z) for z in cls_logits[a]] for a in range(n)]
    raw = [[ref_ciou(boxes[a], t[0]) for a in range(n)] for t in truths]
    sim = [[min(1.0, max(0.0, c)) for c in row] for row in raw]

    picks = []
    score = []
    for j, (box, y) in enumerate(truths):
        x1, y1, x2, y2 = box
        mx, my = (x1 + x2) / 2, (y1 + y2) / 2
        cands = []
        for a, (cx, cy, s) in enumerate(anchors):
            if x1 < cx < x2 and y1 < cy < y2 and math.hypot(cx - mx, cy - my) <= radius * s:
                cands.append(a)
        row = {}
        for a in cands:
            if mode == "tal":
                pos = [probs[a][c] for c in range(k_cls) if y[c] == 1]
                s_val = sum(pos) / len(pos)
                row[a] = s_val**tal_alpha * sim[j][a] ** tal_beta
            else:
                lam = min(1.0, max(1e-8, sim[j][a]))
                cost = 0.0
                for c in range(k_cls):
                    q = lam * probs[a][c]
                    if y[c] == 1:
                        cost -= math.log(max(q, 1e-12))
                    else:
                        cost -= math.log(max(1 - q, 1e-12))
                row[a] = cost - simota_alpha * math.log(lam)
        score.append(row)
        if mode == "simota" and dynamic_k:
            top = sorted((sim[j][a] for a in cands), reverse=True)[:10]
            k = max(1, int(round(sum(top))))
        else:
            k = top_k
        if mode == "tal":
            ordered = sorted(cands, key=lambda a: (-row[a], a))
        else:
            ordered = sorted(cands, key=lambda a: (row[a], a))
        picks.append(ordered[:k])

    matched = [-1] * n
    for a in range(n):
        claim = [j for j in range(len(truths)) if a in picks[j]]
        if not claim:
            continue
        best = claim[0]
        for j in claim[1:]:
            if raw[j][a] > raw[best][a]:
                best = j
        matched[a] = best

    targets = [[0.0] * k_cls for _ in range(n)]
    for j, (box, y) in enumerate(truths):
        members = [a for a in range(n) if matched[a] == j]
        if not members:
            continue
        if mode == "tal":
            big_b = max(sim[j][a] for a in members)
            big_c = max(score[j][a] for a in members)
        for a in members:
            if not soft:
                p = 1.0
            elif mode == "tal":
                p = score[j][a] * big_b / big_c if big_c > 0 else 0.0
            else:
                p = sim[j][a]
            targets[a] = [p * y[c] for c in range(k_cls)]
    return matched, targets


# ---------------------------------------------------------------- evaluation

def ref_average_precision(dets, truths_by_frame, thr=0.5):
    """``dets``: list of (frame, score, box); ``truths_by_frame``: frame -> list of boxes.

    Returns None when there is no truth.
    """
    n_gt = sum(len(v) for v in truths_by_frame.values())
    if n_gt == 0:
        return None
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    taken = {f: [False] * len(v) for f, v in truths_by_frame.items()}
    flags = []
    for i in order:
        frame, _, box = dets[i]
        best, best_j = -1.0, -1
        for j, t in enumerate(truths_by_frame.get(frame, [])):
            if taken[frame][j]:
                continue
            o = ref_iou(box, t)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= thr:
            taken[frame][best_j] = True
            flags.append(1)
        else:
            flags.append(0)
    # precision/recall points
    pts = []
    tp = 0
    for r, f in enumerate(flags, 1):
        tp += f
        pts.append((tp / n_gt, tp / r))
    ap = 0.0
    prev_r = 0.0
    for idx, (rec, _) in enumerate(pts):
        if rec == prev_r:
            continue
        best_p = max(p for (rr, p) in pts[idx:])
        ap += (rec - prev_r) * best_p
        prev_r = rec
    return ap


# ---------------------------------------------------------------- suppression

def ref_nms(dets, thr=0.5):
    """``dets``: list of (frame, cls, score, anchor, box).  Returns kept input indices."""
    kept = []
    groups = {}
    for i, d in enumerate(dets):
        groups.setdefault((d[0], d[1]), []).append(i)
    for members in groups.values():
        remaining = list(members)
        while remaining:
            top = remaining[0]
            for i in remaining[1:]:
                if (-dets[i][2], dets[i][3], i) < (-dets[top][2], dets[top][3], top):
                    top = i
            kept.append(top)
            remaining = [i for i in remaining if i != top and ref_iou(dets[i][4], dets[top][4]) <= thr]
    return kept
