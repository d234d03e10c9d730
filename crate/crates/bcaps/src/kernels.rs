//! Flop-heavy inner loops shared by the graph ops.
//!
//! Every kernel has a sequential implementation and, behind the `parallel`
//! feature, a rayon twin that splits work over independent output slices
//! only. Each output element is produced by the same sequential inner loop in
//! both variants, so results are bitwise identical regardless of feature flag
//! or thread count. The `_seq` forms stay compiled either way for the bench
//! suite and the equality tests.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::scalar::Scalar;

/// c = a·b for row-major a[m,k], b[k,n], c[m,n]. Overwrites c.
pub fn matmul<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    #[cfg(feature = "parallel")]
    {
        matmul_par(m, k, n, a, b, c)
    }
    #[cfg(not(feature = "parallel"))]
    {
        matmul_seq(m, k, n, a, b, c)
    }
}

pub fn matmul_seq<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
        matmul_row(k, n, arow, b, crow);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_exact_mut(n)
        .zip(a.par_chunks_exact(k))
        .take(m)
        .for_each(|(crow, arow)| matmul_row(k, n, arow, b, crow));
}

/// One output row: crow = arow·b. The p-outer / column-inner order keeps the
/// inner loop a contiguous axpy, which autovectorizes.
#[inline]
fn matmul_row<S: Scalar>(k: usize, n: usize, arow: &[S], b: &[S], crow: &mut [S]) {
    crow.fill(S::zero());
    for (p, &ap) in arow.iter().enumerate().take(k) {
        let brow = &b[p * n..(p + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv = *cv + ap * bv;
        }
    }
}

/// out[j,i] = a[i,j] for a[rows,cols].
pub fn transpose<S: Scalar>(rows: usize, cols: usize, a: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Transposes the trailing two axes of a [outer, r, c] tensor.
pub fn transpose_last2<S: Scalar>(outer: usize, r: usize, c: usize, a: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), outer * r * c);
    debug_assert_eq!(out.len(), a.len());
    for (ablk, oblk) in a.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
        transpose(r, c, ablk, oblk);
    }
}

/// Capsule predictions: uhat[b,i,j,:] = Σ_d u[b,i,d]·w[i,j,d,:].
/// u is [batch, ni, di], w is [ni, nj, di, dj], uhat is [batch, ni, nj, dj].
pub fn caps_predict<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    u: &[S],
    w: &[S],
    uhat: &mut [S],
) {
    #[cfg(feature = "parallel")]
    {
        caps_predict_par(batch, ni, nj, di, dj, u, w, uhat)
    }
    #[cfg(not(feature = "parallel"))]
    {
        caps_predict_seq(batch, ni, nj, di, dj, u, w, uhat)
    }
}

pub fn caps_predict_seq<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    u: &[S],
    w: &[S],
    uhat: &mut [S],
) {
    debug_assert_eq!(u.len(), batch * ni * di);
    debug_assert_eq!(w.len(), ni * nj * di * dj);
    debug_assert_eq!(uhat.len(), batch * ni * nj * dj);
    for (ub, ob) in u
        .chunks_exact(ni * di)
        .zip(uhat.chunks_exact_mut(ni * nj * dj))
        .take(batch)
    {
        caps_predict_one(ni, nj, di, dj, ub, w, ob);
    }
}

#[cfg(feature = "parallel")]
pub fn caps_predict_par<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    u: &[S],
    w: &[S],
    uhat: &mut [S],
) {
    debug_assert_eq!(u.len(), batch * ni * di);
    debug_assert_eq!(w.len(), ni * nj * di * dj);
    debug_assert_eq!(uhat.len(), batch * ni * nj * dj);
    uhat.par_chunks_exact_mut(ni * nj * dj)
        .zip(u.par_chunks_exact(ni * di))
        .take(batch)
        .for_each(|(ob, ub)| caps_predict_one(ni, nj, di, dj, ub, w, ob));
}

#[inline]
fn caps_predict_one<S: Scalar>(ni: usize, nj: usize, di: usize, dj: usize, ub: &[S], w: &[S], ob: &mut [S]) {
    ob.fill(S::zero());
    for i in 0..ni {
        let urow = &ub[i * di..(i + 1) * di];
        for j in 0..nj {
            let orow = &mut ob[(i * nj + j) * dj..(i * nj + j + 1) * dj];
            let wblk = &w[((i * nj + j) * di) * dj..((i * nj + j) * di + di) * dj];
            for (d, &ud) in urow.iter().enumerate() {
                let wrow = &wblk[d * dj..(d + 1) * dj];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov = *ov + ud * wv;
                }
            }
        }
    }
}

/// Gradient of caps_predict w.r.t. w: dw[i,j,d,:] = Σ_b u[b,i,d]·dout[b,i,j,:].
pub fn caps_predict_dw<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    u: &[S],
    dout: &[S],
    dw: &mut [S],
) {
    #[cfg(feature = "parallel")]
    {
        caps_predict_dw_par(batch, ni, nj, di, dj, u, dout, dw)
    }
    #[cfg(not(feature = "parallel"))]
    {
        caps_predict_dw_seq(batch, ni, nj, di, dj, u, dout, dw)
    }
}

pub fn caps_predict_dw_seq<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    u: &[S],
    dout: &[S],
    dw: &mut [S],
) {
    debug_assert_eq!(dw.len(), ni * nj * di * dj);
    for (ij, dwblk) in dw.chunks_exact_mut(di * dj).enumerate().take(ni * nj) {
        caps_predict_dw_block(batch, ni, nj, di, dj, ij / nj, ij % nj, u, dout, dwblk);
    }
}

#[cfg(feature = "parallel")]
pub fn caps_predict_dw_par<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    u: &[S],
    dout: &[S],
    dw: &mut [S],
) {
    debug_assert_eq!(dw.len(), ni * nj * di * dj);
    dw.par_chunks_exact_mut(di * dj)
        .enumerate()
        .take(ni * nj)
        .for_each(|(ij, dwblk)| {
            caps_predict_dw_block(batch, ni, nj, di, dj, ij / nj, ij % nj, u, dout, dwblk)
        });
}

#[inline]
fn caps_predict_dw_block<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    i: usize,
    j: usize,
    u: &[S],
    dout: &[S],
    dwblk: &mut [S],
) {
    dwblk.fill(S::zero());
    for b in 0..batch {
        let urow = &u[(b * ni + i) * di..(b * ni + i + 1) * di];
        let grow = &dout[((b * ni + i) * nj + j) * dj..((b * ni + i) * nj + j + 1) * dj];
        for (d, &ud) in urow.iter().enumerate() {
            let drow = &mut dwblk[d * dj..(d + 1) * dj];
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv = *dv + ud * gv;
            }
        }
    }
}

/// Gradient of caps_predict w.r.t. u, given wt = w with trailing axes
/// transposed ([ni, nj, dj, di]): du[b,i,:] = Σ_j Σ_o dout[b,i,j,o]·wt[i,j,o,:].
pub fn caps_predict_du<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    wt: &[S],
    dout: &[S],
    du: &mut [S],
) {
    #[cfg(feature = "parallel")]
    {
        caps_predict_du_par(batch, ni, nj, di, dj, wt, dout, du)
    }
    #[cfg(not(feature = "parallel"))]
    {
        caps_predict_du_seq(batch, ni, nj, di, dj, wt, dout, du)
    }
}

pub fn caps_predict_du_seq<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    wt: &[S],
    dout: &[S],
    du: &mut [S],
) {
    debug_assert_eq!(du.len(), batch * ni * di);
    for (db, gb) in du
        .chunks_exact_mut(ni * di)
        .zip(dout.chunks_exact(ni * nj * dj))
        .take(batch)
    {
        caps_predict_du_one(ni, nj, di, dj, wt, gb, db);
    }
}

#[cfg(feature = "parallel")]
pub fn caps_predict_du_par<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    di: usize,
    dj: usize,
    wt: &[S],
    dout: &[S],
    du: &mut [S],
) {
    debug_assert_eq!(du.len(), batch * ni * di);
    du.par_chunks_exact_mut(ni * di)
        .zip(dout.par_chunks_exact(ni * nj * dj))
        .take(batch)
        .for_each(|(db, gb)| caps_predict_du_one(ni, nj, di, dj, wt, gb, db));
}

#[inline]
fn caps_predict_du_one<S: Scalar>(ni: usize, nj: usize, di: usize, dj: usize, wt: &[S], gb: &[S], db: &mut [S]) {
    db.fill(S::zero());
    for i in 0..ni {
        let drow = &mut db[i * di..(i + 1) * di];
        for j in 0..nj {
            let grow = &gb[(i * nj + j) * dj..(i * nj + j + 1) * dj];
            let wblk = &wt[((i * nj + j) * dj) * di..((i * nj + j) * dj + dj) * di];
            for (o, &gv) in grow.iter().enumerate() {
                let wrow = &wblk[o * di..(o + 1) * di];
                for (dv, &wv) in drow.iter_mut().zip(wrow) {
                    *dv = *dv + gv * wv;
                }
            }
        }
    }
}

/// Coupling-weighted sum: s[b,j,:] = Σ_i k[b,i,j]·uhat[b,i,j,:].
/// k is [batch, ni, nj], uhat is [batch, ni, nj, dj], s is [batch, nj, dj].
pub fn route_sum<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    dj: usize,
    k: &[S],
    uhat: &[S],
    s: &mut [S],
) {
    #[cfg(feature = "parallel")]
    {
        route_sum_par(batch, ni, nj, dj, k, uhat, s)
    }
    #[cfg(not(feature = "parallel"))]
    {
        route_sum_seq(batch, ni, nj, dj, k, uhat, s)
    }
}

pub fn route_sum_seq<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    dj: usize,
    k: &[S],
    uhat: &[S],
    s: &mut [S],
) {
    debug_assert_eq!(s.len(), batch * nj * dj);
    for b in 0..batch {
        route_sum_one(
            ni,
            nj,
            dj,
            &k[b * ni * nj..(b + 1) * ni * nj],
            &uhat[b * ni * nj * dj..(b + 1) * ni * nj * dj],
            &mut s[b * nj * dj..(b + 1) * nj * dj],
        );
    }
}

#[cfg(feature = "parallel")]
pub fn route_sum_par<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    dj: usize,
    k: &[S],
    uhat: &[S],
    s: &mut [S],
) {
    debug_assert_eq!(s.len(), batch * nj * dj);
    s.par_chunks_exact_mut(nj * dj)
        .zip(k.par_chunks_exact(ni * nj).zip(uhat.par_chunks_exact(ni * nj * dj)))
        .take(batch)
        .for_each(|(sb, (kb, ub))| route_sum_one(ni, nj, dj, kb, ub, sb));
}

#[inline]
fn route_sum_one<S: Scalar>(ni: usize, nj: usize, dj: usize, kb: &[S], ub: &[S], sb: &mut [S]) {
    sb.fill(S::zero());
    for i in 0..ni {
        for j in 0..nj {
            let kij = kb[i * nj + j];
            let urow = &ub[(i * nj + j) * dj..(i * nj + j + 1) * dj];
            let srow = &mut sb[j * dj..(j + 1) * dj];
            for (sv, &uv) in srow.iter_mut().zip(urow) {
                *sv = *sv + kij * uv;
            }
        }
    }
}

/// Gradient of route_sum w.r.t. uhat: duhat[b,i,j,:] = k[b,i,j]·ds[b,j,:].
pub fn route_sum_duhat<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    dj: usize,
    k: &[S],
    ds: &[S],
    duhat: &mut [S],
) {
    #[cfg(feature = "parallel")]
    {
        route_sum_duhat_par(batch, ni, nj, dj, k, ds, duhat)
    }
    #[cfg(not(feature = "parallel"))]
    {
        route_sum_duhat_seq(batch, ni, nj, dj, k, ds, duhat)
    }
}

pub fn route_sum_duhat_seq<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    dj: usize,
    k: &[S],
    ds: &[S],
    duhat: &mut [S],
) {
    debug_assert_eq!(duhat.len(), batch * ni * nj * dj);
    for b in 0..batch {
        route_sum_duhat_one(
            ni,
            nj,
            dj,
            &k[b * ni * nj..(b + 1) * ni * nj],
            &ds[b * nj * dj..(b + 1) * nj * dj],
            &mut duhat[b * ni * nj * dj..(b + 1) * ni * nj * dj],
        );
    }
}

#[cfg(feature = "parallel")]
pub fn route_sum_duhat_par<S: Scalar>(
    batch: usize,
    ni: usize,
    nj: usize,
    dj: usize,
    k: &[S],
    ds: &[S],
    duhat: &mut [S],
) {
    debug_assert_eq!(duhat.len(), batch * ni * nj * dj);
    duhat
        .par_chunks_exact_mut(ni * nj * dj)
        .zip(k.par_chunks_exact(ni * nj).zip(ds.par_chunks_exact(nj * dj)))
        .take(batch)
        .for_each(|(db, (kb, gb))| route_sum_duhat_one(ni, nj, dj, kb, gb, db));
}

#[inline]
fn route_sum_duhat_one<S: Scalar>(ni: usize, nj: usize, dj: usize, kb: &[S], gb: &[S], db: &mut [S]) {
    for i in 0..ni {
        for j in 0..nj {
            let kij = kb[i * nj + j];
            let grow = &gb[j * dj..(j + 1) * dj];
            let drow = &mut db[(i * nj + j) * dj..(i * nj + j + 1) * dj];
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv = kij * gv;
            }
        }
    }
}
