"""Pure-numpy scan kernels: the reference backend.

Mirrors the numba kernels function for function. Every (labeling, region)
work item is computed independently and written into a fixed output slot, so
results do not depend on evaluation order or worker count.

Statistic modes:
    0 trajectory  per-group Karcher base, slopes of whitened logs over
                  centered times, squared Frobenius distance of the slopes.
    1 product     Gaussian likelihood-ratio statistic 2(ll1 + ll2 - llpooled)
                  with per-timepoint means and maximum-likelihood covariances.
    2 glm_slope   per-entry least-squares slopes of the per-timepoint
                  matrices over centered times, squared Frobenius distance.

Covariance kinds: 0 sample covariance, 1 Pearson correlation, 2 Spearman
rank correlation (ranks taken within each group-timepoint cell).
"""

from __future__ import annotations

import numpy as np

MODE_TRAJECTORY = 0
MODE_PRODUCT = 1
MODE_GLM_SLOPE = 2

KIND_SAMPLE = 0
KIND_PEARSON = 1
KIND_SPEARMAN = 2

LOG_2PI = 1.8378770664093453


def _sym(a):
    return 0.5 * (a + a.T)


def _floor_spd(a, floor):
    """Clamp eigenvalues below floor up to it.

    Eigenvalue clamping is 1-Lipschitz, so near-rank-deficient inputs stay a
    stable function of the data (the statistic must not jump on ULP jitter).
    Reconstruction can undershoot floor by a few ULP of the top eigenvalue,
    which is harmless: downstream only needs strict positivity.
    """
    w, u = np.linalg.eigh(a)
    if w[0] >= floor:
        return a
    return _sym((u * np.maximum(w, floor)) @ u.T)


def _clamp_pos(w):
    """Eigenvalues of an ill-conditioned SPD product can round to <= 0;
    clamping relative to the top keeps sqrt/log/inverse finite without
    disturbing healthy spectra."""
    floor = w[-1] * 1e-14 if w[-1] > 0.0 else 0.0
    if floor <= 0.0:
        floor = 1e-30
    return np.maximum(w, floor)


def _logm_spd(a):
    w, u = np.linalg.eigh(a)
    return _sym((u * np.log(_clamp_pos(w))) @ u.T)


def _expm_sym(a):
    w, u = np.linalg.eigh(a)
    return _sym((u * np.exp(w)) @ u.T)


def _sqrt_and_inv_sqrt(a):
    w, u = np.linalg.eigh(a)
    rw = np.sqrt(_clamp_pos(w))
    return _sym((u * rw) @ u.T), _sym((u / rw) @ u.T)


def _karcher_mean(covs, step, max_iter, tol_scale):
    """Tangent-space averaging from the first point, with a monotone step.

    The plain fixed-step iteration oscillates forever when the inputs are
    nearly singular (floored covariances sit ~log(1/floor) metric units
    apart), and its last iterate is then chaotic in the inputs. Each update
    must therefore shrink the sum of squared distances; the step is halved
    until it does. With the full step accepted this is plain averaging.
    """
    n = covs.shape[0]
    k = covs.shape[1]
    tol = tol_scale * n
    mean = covs[0].copy()
    half, inv_half = _sqrt_and_inv_sqrt(mean)
    logs = np.empty((n, k, k))
    t_logs = np.empty((n, k, k))
    obj = 0.0
    for i in range(n):
        logs[i] = _logm_spd(_sym(inv_half @ covs[i] @ inv_half))
        obj += np.sum(logs[i] * logs[i])
    for _ in range(max_iter):
        log_sum = logs.sum(axis=0)
        ambient = half @ log_sum @ half
        if np.sqrt(np.sum(ambient * ambient)) <= tol:
            break
        # directional derivative of the objective at s=0 is -2 * gsq
        gsq = np.sum(log_sum * log_sum) / n
        s = step
        accepted = False
        while s > 1e-20:
            trial = _sym(half @ _expm_sym((s / n) * log_sum) @ half)
            t_half, t_inv_half = _sqrt_and_inv_sqrt(trial)
            t_obj = 0.0
            for i in range(n):
                t_logs[i] = _logm_spd(_sym(t_inv_half @ covs[i] @ t_inv_half))
                t_obj += np.sum(t_logs[i] * t_logs[i])
            if t_obj <= obj - 1e-4 * s * 2.0 * gsq:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break  # no step length makes progress: numerical floor reached
        mean = trial
        half = t_half
        inv_half = t_inv_half
        obj = t_obj
        logs, t_logs = t_logs, logs
    return mean


def _to_correlation(cov):
    """Correlation from a covariance; constant features get 0 off / 1 diag."""
    k = cov.shape[0]
    d = np.sqrt(np.maximum(np.diag(cov), 0.0))
    out = np.empty_like(cov)
    for a in range(k):
        for b in range(k):
            if a == b:
                out[a, b] = 1.0
            elif d[a] > 0.0 and d[b] > 0.0:
                out[a, b] = cov[a, b] / (d[a] * d[b])
            else:
                out[a, b] = 0.0
    return out


def _cell_matrix(count, total, scatter, ddof, kind):
    """Per-cell estimate: covariance, or correlation built from the moments."""
    mu = total / count
    cov = _sym((scatter - count * np.outer(mu, mu)) / (count - ddof))
    if kind == KIND_SAMPLE:
        return cov
    return _to_correlation(cov)


def _avg_ranks(values):
    """Ranks starting at 1, ties replaced by their average rank."""
    m = values.shape[0]
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(m)
    i = 0
    while i < m:
        j = i
        while j + 1 < m and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for h in range(i, j + 1):
            ranks[order[h]] = avg
        i = j + 1
    return ranks


def _trajectory_stat(
    counts, sums, scat, times, kind, floor, step, max_iter, tol, eu, ev
):
    """One chi-square coordinate per region edge.

    The whitened per-timepoint estimates have off-diagonal noise variance
    1/(m-1) per entry, so the slope-difference entry at an edge has variance
    vhat and the scaled sum of squares is ~ chi2 with edge-count degrees of
    freedom under the null. That scale is what the standardization and the
    size correction downstream assume.
    """
    k = scat.shape[2]
    slopes = np.empty((2, k, k))
    vhat = 0.0
    for g in (0, 1):
        valid = np.flatnonzero(counts[:, g] >= 2)
        covs = np.empty((len(valid), k, k))
        for j, t in enumerate(valid):
            mat = _cell_matrix(counts[t, g], sums[t, g], scat[t, g], 1, kind)
            covs[j] = _floor_spd(mat, floor)
        base = _karcher_mean(covs, step, max_iter, tol)
        _, inv_half = _sqrt_and_inv_sqrt(base)
        tc = times[valid] - times[valid].mean()
        den = np.sum(tc * tc)
        slope = np.zeros((k, k))
        var_g = 0.0
        for j in range(len(valid)):
            slope += tc[j] * _logm_spd(_sym(inv_half @ covs[j] @ inv_half))
            var_g += tc[j] * tc[j] / (counts[valid[j], g] - 1.0)
        slopes[g] = slope / den
        vhat += var_g / (den * den)
    diff = slopes[0] - slopes[1]
    raw = 0.0
    for e in range(len(eu)):
        d = diff[eu[e], ev[e]]
        raw += d * d
    return float(raw / vhat)


def _glm_slope_stat(counts, sums, scat, times, kind, eu, ev):
    """Edge-entry slope differences scaled by their estimated variance.

    Entry noise per cell is the moment plug-in: (M_aa*M_bb + M_ab^2)/(m-1)
    for covariances (Wishart second moments), (1 - M_ab^2)^2/(m-1) for
    correlation kinds. Entries whose estimated variance degenerates to zero
    (constant or duplicated features) also have zero difference; they
    contribute nothing rather than 0/0.
    """
    k = scat.shape[2]
    n_e = len(eu)
    slopes = np.empty((2, k, k))
    evar = np.zeros(n_e)
    for g in (0, 1):
        valid = np.flatnonzero(counts[:, g] >= 2)
        tc = times[valid] - times[valid].mean()
        den = np.sum(tc * tc)
        slope = np.zeros((k, k))
        for j, t in enumerate(valid):
            mat = _cell_matrix(counts[t, g], sums[t, g], scat[t, g], 1, kind)
            slope += tc[j] * mat
            w = tc[j] * tc[j] / (den * den * (counts[t, g] - 1.0))
            for e in range(n_e):
                a, b = eu[e], ev[e]
                if kind == KIND_SAMPLE:
                    evar[e] += w * (mat[a, a] * mat[b, b] + mat[a, b] * mat[a, b])
                else:
                    r2 = 1.0 - mat[a, b] * mat[a, b]
                    evar[e] += w * r2 * r2
        slopes[g] = slope / den
    diff = slopes[0] - slopes[1]
    raw = 0.0
    for e in range(n_e):
        if evar[e] > 0.0:
            d = diff[eu[e], ev[e]]
            raw += d * d / evar[e]
    return float(raw)


def _gaussian_loglik(count, total, scatter, floor):
    """Log-likelihood of the rows behind the moments under their own MLE fit.

    Uses sum_rows (x - mu)^T S^-1 (x - mu) = n * tr(S^-1 C_mle), which stays
    exact when the evaluation covariance S is the floored version of C_mle.
    """
    k = len(total)
    mu = total / count
    c_mle = _sym(scatter / count - np.outer(mu, mu))
    s = _floor_spd(c_mle, floor)
    w, u = np.linalg.eigh(s)
    logdet = np.sum(np.log(w))
    s_inv = (u / w) @ u.T
    quad = count * np.sum(s_inv * c_mle)
    return -0.5 * (count * (k * LOG_2PI + logdet) + quad)


def _product_stat(counts, sums, scat, floor):
    valid = np.flatnonzero((counts[:, 0] >= 2) & (counts[:, 1] >= 2))
    ll = 0.0
    for t in valid:
        for g in (0, 1):
            ll += _gaussian_loglik(counts[t, g], sums[t, g], scat[t, g], floor)
        ll -= _gaussian_loglik(
            counts[t, 0] + counts[t, 1],
            sums[t, 0] + sums[t, 1],
            scat[t, 0] + scat[t, 1],
            floor,
        )
    return float(2.0 * ll)


def _region_totals(xs, time_offsets, reg_idx):
    """Per-timepoint sum vectors and scatter matrices over all rows."""
    n_times = len(time_offsets) - 1
    k = len(reg_idx)
    tot_sums = np.empty((n_times, k))
    tot_scat = np.empty((n_times, k, k))
    for t in range(n_times):
        block = xs[time_offsets[t] : time_offsets[t + 1]][:, reg_idx]
        tot_sums[t] = block.sum(axis=0)
        tot_scat[t] = block.T @ block
    return tot_sums, tot_scat


def _group_split(xs, time_offsets, row_subject, labels_w, reg_idx, tot_sums, tot_scat):
    """Group-0 moments by scan, group-1 by subtraction from the totals."""
    n_times = len(time_offsets) - 1
    k = len(reg_idx)
    counts = np.empty((n_times, 2), dtype=np.int64)
    sums = np.empty((n_times, 2, k))
    scat = np.empty((n_times, 2, k, k))
    for t in range(n_times):
        lo, hi = time_offsets[t], time_offsets[t + 1]
        mask0 = labels_w[row_subject[lo:hi]] == 0
        b0 = xs[lo:hi][mask0][:, reg_idx]
        counts[t, 0] = b0.shape[0]
        counts[t, 1] = (hi - lo) - b0.shape[0]
        sums[t, 0] = b0.sum(axis=0)
        sums[t, 1] = tot_sums[t] - sums[t, 0]
        scat[t, 0] = b0.T @ b0
        scat[t, 1] = tot_scat[t] - scat[t, 0]
    return counts, sums, scat


def _rank_split(xs, time_offsets, row_subject, labels_w, reg_idx):
    """Moments of within-cell rank-transformed data (Spearman path).

    Ranks are taken per feature within each group-timepoint cell, so moments
    cannot be recovered by subtraction from pooled totals; both groups are
    scanned directly.
    """
    n_times = len(time_offsets) - 1
    k = len(reg_idx)
    counts = np.zeros((n_times, 2), dtype=np.int64)
    sums = np.zeros((n_times, 2, k))
    scat = np.zeros((n_times, 2, k, k))
    for t in range(n_times):
        lo, hi = time_offsets[t], time_offsets[t + 1]
        lab = labels_w[row_subject[lo:hi]]
        block = xs[lo:hi]
        for g in (0, 1):
            rows = np.flatnonzero(lab == g)
            counts[t, g] = len(rows)
            if len(rows) == 0:
                continue
            ranked = np.empty((len(rows), k))
            for a in range(k):
                ranked[:, a] = _avg_ranks(block[rows, reg_idx[a]])
            sums[t, g] = ranked.sum(axis=0)
            scat[t, g] = ranked.T @ ranked
    return counts, sums, scat


def _one_region(
    xs,
    time_offsets,
    row_subject,
    labels,
    times,
    reg_idx,
    eu,
    ev,
    mode,
    cov_kind,
    spd_floor,
    karcher_step,
    karcher_max_iter,
    karcher_tol,
    out_col,
):
    if cov_kind != KIND_SPEARMAN:
        tot_sums, tot_scat = _region_totals(xs, time_offsets, reg_idx)
    for w in range(labels.shape[0]):
        if cov_kind == KIND_SPEARMAN:
            counts, sums, scat = _rank_split(
                xs, time_offsets, row_subject, labels[w], reg_idx
            )
            kind = KIND_PEARSON  # Spearman = Pearson on the ranks
        else:
            counts, sums, scat = _group_split(
                xs, time_offsets, row_subject, labels[w], reg_idx, tot_sums, tot_scat
            )
            kind = cov_kind
        if mode == MODE_TRAJECTORY:
            out_col[w] = _trajectory_stat(
                counts,
                sums,
                scat,
                times,
                kind,
                spd_floor,
                karcher_step,
                karcher_max_iter,
                karcher_tol,
                eu,
                ev,
            )
        elif mode == MODE_PRODUCT:
            out_col[w] = _product_stat(counts, sums, scat, spd_floor)
        else:
            out_col[w] = _glm_slope_stat(counts, sums, scat, times, kind, eu, ev)


def region_stats(
    xs,
    time_offsets,
    row_subject,
    labels,
    times,
    reg_verts,
    reg_offsets,
    edge_u,
    edge_v,
    edge_offsets,
    mode,
    cov_kind,
    spd_floor,
    karcher_step,
    karcher_max_iter,
    karcher_tol,
):
    """Raw statistic for every (labeling, region) pair; shape (W, R)."""
    n_reg = len(reg_offsets) - 1
    out = np.empty((labels.shape[0], n_reg))
    for r in range(n_reg):
        reg_idx = reg_verts[reg_offsets[r] : reg_offsets[r + 1]]
        eu = edge_u[edge_offsets[r] : edge_offsets[r + 1]]
        ev = edge_v[edge_offsets[r] : edge_offsets[r + 1]]
        _one_region(
            xs,
            time_offsets,
            row_subject,
            labels,
            times,
            reg_idx,
            eu,
            ev,
            mode,
            cov_kind,
            spd_floor,
            karcher_step,
            karcher_max_iter,
            karcher_tol,
            out[:, r],
        )
    return out
