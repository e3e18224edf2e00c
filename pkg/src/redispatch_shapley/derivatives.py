"""First and second derivatives of bus injections and branch flows in polar form.

Every function takes complex voltages ``V`` and returns sparse matrices whose
columns are ordered (angles, magnitudes). Second-derivative functions return
the Hessian of ``lam · f(V)`` for a fixed multiplier vector ``lam``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _diag(v):
    return sp.diags(v, 0, format="csr")


def dsbus_dv(ybus, V):
    """d(V·conj(Ybus V)) with respect to angle and magnitude."""
    ibus = ybus @ V
    dv = _diag(V)
    dvn = _diag(V / np.abs(V))
    di = _diag(ibus)
    ds_dvm = dv @ np.conj(ybus @ dvn) + np.conj(di) @ dvn
    ds_dva = 1j * dv @ np.conj(di - ybus @ dv)
    return ds_dva.tocsr(), ds_dvm.tocsr()


def dsbr_dv(ybr, cbr, V):
    """Derivatives of end flows ``S = (Cbr V)·conj(Ybr V)`` and the flows."""
    ibr = ybr @ V
    vbr = cbr @ V
    dibr = _diag(ibr)
    dvbr = _diag(vbr)
    dv = _diag(V)
    dvn = _diag(V / np.abs(V))
    ds_dva = 1j * (np.conj(dibr) @ cbr @ dv - dvbr @ np.conj(ybr @ dv))
    ds_dvm = dvbr @ np.conj(ybr @ dvn) + np.conj(dibr) @ cbr @ dvn
    return ds_dva.tocsr(), ds_dvm.tocsr(), vbr * np.conj(ibr)


def dabr_dv(ds_dva, ds_dvm, s):
    """Derivatives of |S|² from derivatives of S."""
    dre = _diag(s.real)
    dim = _diag(s.imag)
    da_dva = 2 * (dre @ ds_dva.real + dim @ ds_dva.imag)
    da_dvm = 2 * (dre @ ds_dvm.real + dim @ ds_dvm.imag)
    return da_dva.tocsr(), da_dvm.tocsr()


def d2sbus_dv2(ybus, V, lam):
    """Blocks (aa, av, va, vv) of the Hessian of lam·Sbus(V) (complex)."""
    n = V.size
    ibus = ybus @ V
    dibus = _diag(ibus)
    a = _diag(lam * V)
    b = ybus @ _diag(V)
    c = a @ np.conj(b)
    d = ybus.conj().T @ _diag(V)
    e = _diag(np.conj(V)) @ (d @ _diag(lam) - _diag(d @ lam))
    f = c - a @ np.conj(dibus)
    g = _diag(np.ones(n) / np.abs(V))
    gaa = e + f
    gva = 1j * g @ (e - f)
    gav = gva.T
    gvv = g @ (c + c.T) @ g
    return gaa.tocsr(), gav.tocsr(), gva.tocsr(), gvv.tocsr()


def d2sbr_dv2(cbr, ybr, V, lam):
    """Blocks of the Hessian of lam·Sbr(V) (complex)."""
    n = V.size
    diaglam = _diag(lam)
    dv = _diag(V)
    a = ybr.conj().T @ diaglam @ cbr
    b = np.conj(dv) @ a @ dv
    d = _diag((a @ V) * np.conj(V))
    e = _diag((a.T @ np.conj(V)) * V)
    f = b + b.T
    g = _diag(np.ones(n) / np.abs(V))
    haa = f - d - e
    hva = 1j * g @ (b - b.T - d + e)
    hav = hva.T
    hvv = g @ f @ g
    return haa.tocsr(), hav.tocsr(), hva.tocsr(), hvv.tocsr()


def d2abr_dv2(ds_dva, ds_dvm, s, cbr, ybr, V, lam):
    """Blocks of the Hessian of lam·|Sbr(V)|² (real)."""
    diaglam = _diag(lam)
    saa, sav, sva, svv = d2sbr_dv2(cbr, ybr, V, np.conj(s) * lam)
    haa = 2 * (saa + ds_dva.T @ diaglam @ np.conj(ds_dva)).real
    hva = 2 * (sva + ds_dvm.T @ diaglam @ np.conj(ds_dva)).real
    hav = 2 * (sav + ds_dva.T @ diaglam @ np.conj(ds_dvm)).real
    hvv = 2 * (svv + ds_dvm.T @ diaglam @ np.conj(ds_dvm)).real
    return haa.tocsr(), hav.tocsr(), hva.tocsr(), hvv.tocsr()
