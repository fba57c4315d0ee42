"""Numba scan kernels: jit-compiled twin of :mod:`covscan._kernels_numpy`.

Same math, loop style, with permutation-by-region work items parallelized
over regions via prange. Each work item writes one fixed output slot and
carries its own scratch arrays, so results are bit-identical for any worker
count.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

MODE_TRAJECTORY = 0
MODE_PRODUCT = 1
MODE_GLM_SLOPE = 2

KIND_SAMPLE = 0
KIND_PEARSON = 1
KIND_SPEARMAN = 2

LOG_2PI = 1.8378770664093453


@njit(cache=True)
def _sym(a):
    k = a.shape[0]
    out = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            out[i, j] = 0.5 * (a[i, j] + a[j, i])
    return out


@njit(cache=True)
def _recompose(u, d):
    # (u * d) @ u.T for eigvectors u, eigvalue transform d
    return _sym((u * d) @ u.T)


@njit(cache=True)
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
    return _recompose(u, np.maximum(w, floor))


@njit(cache=True)
def _clamp_pos(w):
    """Eigenvalues of an ill-conditioned SPD product can round to <= 0;
    clamping relative to the top keeps sqrt/log/inverse finite without
    disturbing healthy spectra."""
    floor = w[-1] * 1e-14 if w[-1] > 0.0 else 0.0
    if floor <= 0.0:
        floor = 1e-30
    return np.maximum(w, floor)


@njit(cache=True)
def _logm_spd(a):
    w, u = np.linalg.eigh(a)
    return _recompose(u, np.log(_clamp_pos(w)))


@njit(cache=True)
def _expm_sym(a):
    w, u = np.linalg.eigh(a)
    return _recompose(u, np.exp(w))


@njit(cache=True)
def _sqrt_and_inv_sqrt(a):
    w, u = np.linalg.eigh(a)
    rw = np.sqrt(_clamp_pos(w))
    return _recompose(u, rw), _recompose(u, 1.0 / rw)


@njit(cache=True)
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
        log_sum = np.zeros((k, k))
        for i in range(n):
            log_sum += logs[i]
        ambient = half @ log_sum @ half
        if np.sqrt(np.sum(ambient * ambient)) <= tol:
            break
        # directional derivative of the objective at s=0 is -2 * gsq
        gsq = np.sum(log_sum * log_sum) / n
        s = step
        accepted = False
        trial = mean
        t_half = half
        t_inv_half = inv_half
        t_obj = obj
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
        tmp = logs
        logs = t_logs
        t_logs = tmp
    return mean


@njit(cache=True)
def _to_correlation(cov):
    """Correlation from a covariance; constant features get 0 off / 1 diag."""
    k = cov.shape[0]
    d = np.empty(k)
    for a in range(k):
        d[a] = np.sqrt(max(cov[a, a], 0.0))
    out = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            if a == b:
                out[a, b] = 1.0
            elif d[a] > 0.0 and d[b] > 0.0:
                out[a, b] = cov[a, b] / (d[a] * d[b])
            else:
                out[a, b] = 0.0
    return out


@njit(cache=True)
def _cell_matrix(count, total, scatter, ddof, kind):
    """Per-cell estimate: covariance, or correlation built from the moments."""
    k = total.shape[0]
    mu = total / count
    cov = np.empty((k, k))
    denom = count - ddof
    for a in range(k):
        for b in range(k):
            cov[a, b] = (scatter[a, b] - count * mu[a] * mu[b]) / denom
    cov = _sym(cov)
    if kind == KIND_SAMPLE:
        return cov
    return _to_correlation(cov)


@njit(cache=True)
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


@njit(cache=True)
def _valid_timepoints(counts, g):
    n_times = counts.shape[0]
    n_valid = 0
    for t in range(n_times):
        if counts[t, g] >= 2:
            n_valid += 1
    valid = np.empty(n_valid, dtype=np.int64)
    i = 0
    for t in range(n_times):
        if counts[t, g] >= 2:
            valid[i] = t
            i += 1
    return valid


@njit(cache=True)
def _trajectory_stat(counts, sums, scat, times, kind, floor, step, max_iter, tol, eu, ev):
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
    for g in range(2):
        valid = _valid_timepoints(counts, g)
        n_valid = valid.shape[0]
        covs = np.empty((n_valid, k, k))
        for j in range(n_valid):
            t = valid[j]
            mat = _cell_matrix(counts[t, g], sums[t, g], scat[t, g], 1, kind)
            covs[j] = _floor_spd(mat, floor)
        base = _karcher_mean(covs, step, max_iter, tol)
        _, inv_half = _sqrt_and_inv_sqrt(base)
        tmean = 0.0
        for j in range(n_valid):
            tmean += times[valid[j]]
        tmean /= n_valid
        denom = 0.0
        for j in range(n_valid):
            tc = times[valid[j]] - tmean
            denom += tc * tc
        slope = np.zeros((k, k))
        var_g = 0.0
        for j in range(n_valid):
            tc = times[valid[j]] - tmean
            slope += tc * _logm_spd(_sym(inv_half @ covs[j] @ inv_half))
            var_g += tc * tc / (counts[valid[j], g] - 1.0)
        for a in range(k):
            for b in range(k):
                slopes[g, a, b] = slope[a, b] / denom
        vhat += var_g / (denom * denom)
    raw = 0.0
    for e in range(eu.shape[0]):
        d = slopes[0, eu[e], ev[e]] - slopes[1, eu[e], ev[e]]
        raw += d * d
    return raw / vhat


@njit(cache=True)
def _glm_slope_stat(counts, sums, scat, times, kind, eu, ev):
    """Edge-entry slope differences scaled by their estimated variance.

    Entry noise per cell is the moment plug-in: (M_aa*M_bb + M_ab^2)/(m-1)
    for covariances (Wishart second moments), (1 - M_ab^2)^2/(m-1) for
    correlation kinds. Entries whose estimated variance degenerates to zero
    (constant or duplicated features) also have zero difference; they
    contribute nothing rather than 0/0.
    """
    k = scat.shape[2]
    n_e = eu.shape[0]
    slopes = np.empty((2, k, k))
    evar = np.zeros(n_e)
    for g in range(2):
        valid = _valid_timepoints(counts, g)
        n_valid = valid.shape[0]
        tmean = 0.0
        for j in range(n_valid):
            tmean += times[valid[j]]
        tmean /= n_valid
        denom = 0.0
        for j in range(n_valid):
            tc = times[valid[j]] - tmean
            denom += tc * tc
        slope = np.zeros((k, k))
        for j in range(n_valid):
            t = valid[j]
            tc = times[t] - tmean
            mat = _cell_matrix(counts[t, g], sums[t, g], scat[t, g], 1, kind)
            slope += tc * mat
            w = tc * tc / (denom * denom * (counts[t, g] - 1.0))
            for e in range(n_e):
                a, b = eu[e], ev[e]
                if kind == KIND_SAMPLE:
                    evar[e] += w * (mat[a, a] * mat[b, b] + mat[a, b] * mat[a, b])
                else:
                    r2 = 1.0 - mat[a, b] * mat[a, b]
                    evar[e] += w * r2 * r2
        for a in range(k):
            for b in range(k):
                slopes[g, a, b] = slope[a, b] / denom
    raw = 0.0
    for e in range(n_e):
        if evar[e] > 0.0:
            d = slopes[0, eu[e], ev[e]] - slopes[1, eu[e], ev[e]]
            raw += d * d / evar[e]
    return raw


@njit(cache=True)
def _gaussian_loglik(count, total, scatter, floor):
    """Log-likelihood of the rows behind the moments under their own MLE fit.

    Uses sum_rows (x - mu)^T S^-1 (x - mu) = n * tr(S^-1 C_mle), which stays
    exact when the evaluation covariance S is the floored version of C_mle.
    """
    k = total.shape[0]
    mu = total / count
    c_mle = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            c_mle[a, b] = scatter[a, b] / count - mu[a] * mu[b]
    c_mle = _sym(c_mle)
    s = _floor_spd(c_mle, floor)
    w, u = np.linalg.eigh(s)
    logdet = np.sum(np.log(w))
    s_inv = (u / w) @ u.T
    quad = count * np.sum(s_inv * c_mle)
    return -0.5 * (count * (k * LOG_2PI + logdet) + quad)


@njit(cache=True)
def _product_stat(counts, sums, scat, floor):
    n_times = counts.shape[0]
    k = scat.shape[2]
    pooled_sum = np.empty(k)
    pooled_scat = np.empty((k, k))
    ll = 0.0
    for t in range(n_times):
        if counts[t, 0] < 2 or counts[t, 1] < 2:
            continue
        for g in range(2):
            ll += _gaussian_loglik(counts[t, g], sums[t, g], scat[t, g], floor)
        for a in range(k):
            pooled_sum[a] = sums[t, 0, a] + sums[t, 1, a]
            for b in range(k):
                pooled_scat[a, b] = scat[t, 0, a, b] + scat[t, 1, a, b]
        ll -= _gaussian_loglik(counts[t, 0] + counts[t, 1], pooled_sum, pooled_scat, floor)
    return 2.0 * ll


@njit(cache=True)
def _region_totals(xs, time_offsets, reg_idx):
    """Per-timepoint sum vectors and scatter matrices over all rows."""
    n_times = time_offsets.shape[0] - 1
    k = reg_idx.shape[0]
    tot_sums = np.zeros((n_times, k))
    tot_scat = np.zeros((n_times, k, k))
    for t in range(n_times):
        for row in range(time_offsets[t], time_offsets[t + 1]):
            for a in range(k):
                xa = xs[row, reg_idx[a]]
                tot_sums[t, a] += xa
                for b in range(a, k):
                    tot_scat[t, a, b] += xa * xs[row, reg_idx[b]]
        for a in range(k):
            for b in range(a):
                tot_scat[t, a, b] = tot_scat[t, b, a]
    return tot_sums, tot_scat


@njit(cache=True)
def _group_split(
    xs, time_offsets, row_subject, labels_w, reg_idx, tot_sums, tot_scat, counts, sums, scat
):
    """Group-0 moments by scan, group-1 by subtraction from the totals."""
    n_times = time_offsets.shape[0] - 1
    k = reg_idx.shape[0]
    for t in range(n_times):
        lo, hi = time_offsets[t], time_offsets[t + 1]
        c0 = 0
        for a in range(k):
            sums[t, 0, a] = 0.0
            for b in range(k):
                scat[t, 0, a, b] = 0.0
        for row in range(lo, hi):
            if labels_w[row_subject[row]] == 0:
                c0 += 1
                for a in range(k):
                    xa = xs[row, reg_idx[a]]
                    sums[t, 0, a] += xa
                    for b in range(a, k):
                        scat[t, 0, a, b] += xa * xs[row, reg_idx[b]]
        for a in range(k):
            for b in range(a):
                scat[t, 0, a, b] = scat[t, 0, b, a]
        counts[t, 0] = c0
        counts[t, 1] = (hi - lo) - c0
        for a in range(k):
            sums[t, 1, a] = tot_sums[t, a] - sums[t, 0, a]
            for b in range(k):
                scat[t, 1, a, b] = tot_scat[t, a, b] - scat[t, 0, a, b]


@njit(cache=True)
def _rank_split(xs, time_offsets, row_subject, labels_w, reg_idx, counts, sums, scat):
    """Moments of within-cell rank-transformed data (Spearman path).

    Ranks are taken per feature within each group-timepoint cell, so moments
    cannot be recovered by subtraction from pooled totals; both groups are
    scanned directly.
    """
    n_times = time_offsets.shape[0] - 1
    k = reg_idx.shape[0]
    for t in range(n_times):
        lo, hi = time_offsets[t], time_offsets[t + 1]
        for g in range(2):
            n_g = 0
            for row in range(lo, hi):
                if labels_w[row_subject[row]] == g:
                    n_g += 1
            counts[t, g] = n_g
            for a in range(k):
                sums[t, g, a] = 0.0
                for b in range(k):
                    scat[t, g, a, b] = 0.0
            if n_g == 0:
                continue
            vals = np.empty(n_g)
            ranked = np.empty((n_g, k))
            for a in range(k):
                i = 0
                for row in range(lo, hi):
                    if labels_w[row_subject[row]] == g:
                        vals[i] = xs[row, reg_idx[a]]
                        i += 1
                ranked[:, a] = _avg_ranks(vals)
            for i in range(n_g):
                for a in range(k):
                    ra = ranked[i, a]
                    sums[t, g, a] += ra
                    for b in range(a, k):
                        scat[t, g, a, b] += ra * ranked[i, b]
            for a in range(k):
                for b in range(a):
                    scat[t, g, a, b] = scat[t, g, b, a]


@njit(parallel=True, cache=True)
def _region_stats_impl(
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
    out,
):
    n_reg = reg_offsets.shape[0] - 1
    n_times = time_offsets.shape[0] - 1
    for r in prange(n_reg):
        reg_idx = reg_verts[reg_offsets[r] : reg_offsets[r + 1]]
        eu = edge_u[edge_offsets[r] : edge_offsets[r + 1]]
        ev = edge_v[edge_offsets[r] : edge_offsets[r + 1]]
        k = reg_idx.shape[0]
        spearman = cov_kind == KIND_SPEARMAN
        kind = KIND_PEARSON if spearman else cov_kind  # Spearman = Pearson on ranks
        if spearman:
            tot_sums = np.zeros((0, 0))
            tot_scat = np.zeros((0, 0, 0))
        else:
            tot_sums, tot_scat = _region_totals(xs, time_offsets, reg_idx)
        counts = np.empty((n_times, 2), dtype=np.int64)
        sums = np.empty((n_times, 2, k))
        scat = np.empty((n_times, 2, k, k))
        for w in range(labels.shape[0]):
            if spearman:
                _rank_split(
                    xs, time_offsets, row_subject, labels[w], reg_idx, counts, sums, scat
                )
            else:
                _group_split(
                    xs,
                    time_offsets,
                    row_subject,
                    labels[w],
                    reg_idx,
                    tot_sums,
                    tot_scat,
                    counts,
                    sums,
                    scat,
                )
            if mode == MODE_TRAJECTORY:
                out[w, r] = _trajectory_stat(
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
                out[w, r] = _product_stat(counts, sums, scat, spd_floor)
            else:
                out[w, r] = _glm_slope_stat(counts, sums, scat, times, kind, eu, ev)


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
    out = np.empty((labels.shape[0], len(reg_offsets) - 1))
    _region_stats_impl(
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
        out,
    )
    return out
