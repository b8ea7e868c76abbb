"""Finite-volume pseudo-two-dimensional (Doyle-Fuller-Newman) cell simulator.

State layout: 20 x-cells per electrode, each holding a spherical particle
discretized into 20 radial shells (shell-volume form, so lithium bookkeeping
is exact to solver precision); electrolyte concentration and potential live
on a 60-cell grid spanning negative electrode / separator / positive
electrode.  Time stepping is fully implicit Euler.  Because solid and
electrolyte diffusion are linear in the concentrations for a given
interfacial flux, each step eliminates them exactly through precomputed
resolvent matrices and Newton-iterates only the algebraic core: electrolyte
potential, solid potentials, and Butler-Volmer fluxes (140 unknowns).

Discharge current is positive.  The applied current of a substep is the
value at the end of the substep (consistent with implicit Euler); a halved
retry ladder down to 1/16 s handles Newton failures at hard transients.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import PhysicalityError, SolverError
from .params import FARADAY, GAS_CONSTANT, ParameterSet

N_X = 20          # x-cells per electrode
N_R = 20          # radial shells per particle
N_SEP = 20        # x-cells in the separator
N_E = 3 * N_X     # electrolyte grid cells

_PHI_E = slice(0, 60)
_PHI_N = slice(60, 80)
_PHI_P = slice(80, 100)
_J_N = slice(100, 120)
_J_P = slice(120, 140)
_N_UNK = 140

_NEWTON_TOL = 1e-10
_NEWTON_MAXIT = 40
_MIN_DT = 1.0 / 16.0
_CE_FLOOR = 1.0          # mol/m^3, evaluation floor for kappa/log/sqrt
_THETA_FLOOR = 1e-9
_SINH_CAP = 50.0


@dataclass
class CellState:
    """Full simulator state at one instant.

    ``c_n`` and ``c_p`` are scaled solid concentrations on the (x, r) grid,
    x index outer.  ``c_e`` is the electrolyte concentration in mol/m^3 and
    ``phi_*`` are potentials in volts on their respective grids.
    """

    c_n: np.ndarray      # (20, 20) scaled
    c_p: np.ndarray      # (20, 20) scaled
    c_e: np.ndarray      # (60,) mol/m^3
    phi_e: np.ndarray    # (60,) V
    phi_s_n: np.ndarray  # (20,) V
    phi_s_p: np.ndarray  # (20,) V
    V: float             # terminal voltage, V
    t: float             # simulation time, s

    def copy(self) -> "CellState":
        return CellState(self.c_n.copy(), self.c_p.copy(), self.c_e.copy(),
                         self.phi_e.copy(), self.phi_s_n.copy(),
                         self.phi_s_p.copy(), self.V, self.t)


@dataclass
class FailureEvent:
    """Voltage reached the cutoff inside a step.

    ``state`` is the linearly interpolated terminal state with V set to the
    cutoff; ``time`` is the interpolated crossing time.
    """

    state: CellState
    time: float


@dataclass
class SimOutcome:
    """Trajectory recorded every 100 s plus failure bookkeeping."""

    trajectory: list        # CellState at t = 0, 100, ... (+ terminal entry)
    failed: bool
    failure_time: float | None = None
    failure_window: int | None = None

    def voltages(self) -> np.ndarray:
        return np.array([s.V for s in self.trajectory])

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.trajectory])

    def n_windows(self) -> int:
        """Number of (possibly partial) 100 s windows covered."""
        if self.failed:
            return self.failure_window + 1
        return len(self.trajectory) - 1

    def to_csv(self, path) -> None:
        """One row per recorded state: t, V, 400 c_n values, 400 c_p values."""
        with open(path, "w") as fh:
            head = ["t", "V"]
            head += [f"c_n_{i}_{j}" for i in range(N_X) for j in range(N_R)]
            head += [f"c_p_{i}_{j}" for i in range(N_X) for j in range(N_R)]
            fh.write(",".join(head) + "\n")
            for s in self.trajectory:
                row = [repr(float(s.t)), repr(float(s.V))]
                row += [repr(float(v)) for v in s.c_n.reshape(-1)]
                row += [repr(float(v)) for v in s.c_p.reshape(-1)]
                fh.write(",".join(row) + "\n")


class _NewtonFail(Exception):
    def __init__(self, residual):
        self.residual = residual


class _StepOperator:
    """Resolvent matrices and constant Jacobian blocks for one dt."""

    def __init__(self, sim: "Simulator", dt: float):
        p = sim.params
        self.dt = dt
        # solid-phase resolvents, one per electrode (shared by all x-cells)
        self.P_sn, self.w_sn, self.alpha_n = _solid_resolvent(
            p.R_n, p.D_n, p.c_max_n, dt)
        self.P_sp, self.w_sp, self.alpha_p = _solid_resolvent(
            p.R_p, p.D_p, p.c_max_p, dt)
        # electrolyte diffusion resolvent and flux-source map
        cap = sim.eps * sim.dx / dt
        ke = np.zeros((N_E, N_E))
        g = sim.de_face / sim.h_face                      # (59,)
        idx = np.arange(N_E - 1)
        ke[idx, idx] += g
        ke[idx + 1, idx + 1] += g
        ke[idx, idx + 1] -= g
        ke[idx + 1, idx] -= g
        m = ke + np.diag(cap)
        minv = np.linalg.inv(m)
        self.P_e = minv * cap[None, :]
        src = np.zeros((N_E, 2 * N_X))
        cols = np.arange(N_X)
        src[sim.cell_n, cols] = sim.dx[sim.cell_n] * (1 - p.t_plus) * p.a_n
        src[sim.cell_p, N_X + cols] = sim.dx[sim.cell_p] * (1 - p.t_plus) * p.a_p
        self.S = minv @ src


def _solid_resolvent(radius, diff, c_max, dt):
    """Implicit-Euler resolvent for spherical shell diffusion.

    Returns (P, w, alpha) with theta_new = P @ theta_old - (j/c_max) * w and
    surface value theta_surf = theta_new[-1] - j * alpha_extra, folded so
    theta_surf = (P @ theta_old)[-1] - j * alpha.
    """
    dr = radius / N_R
    r_f = dr * np.arange(N_R + 1)
    a_f = 4.0 * np.pi * r_f ** 2
    v_sh = (4.0 * np.pi / 3.0) * np.diff(r_f ** 3)
    k = np.zeros((N_R, N_R))
    g = a_f[1:N_R] * diff / dr
    idx = np.arange(N_R - 1)
    k[idx, idx] += g
    k[idx + 1, idx + 1] += g
    k[idx, idx + 1] -= g
    k[idx + 1, idx] -= g
    m = k + np.diag(v_sh / dt)
    minv = np.linalg.inv(m)
    p_mat = minv * (v_sh / dt)[None, :]
    w = minv[:, -1] * a_f[-1]
    alpha = (w[-1] + dr / (2.0 * diff)) / c_max
    return p_mat, w, alpha


class Simulator:
    """Reusable solver bound to one parameter set.

    Geometry and per-dt operators are precomputed once; the Newton
    preconditioner is carried in a per-run workspace so concurrent runs on
    separate Simulator instances share nothing mutable.
    """

    def __init__(self, params: ParameterSet):
        self.params = params
        p = params
        self.dx = np.concatenate([np.full(N_X, p.L_n / N_X),
                                  np.full(N_SEP, p.L_sep / N_SEP),
                                  np.full(N_X, p.L_p / N_X)])
        self.eps = np.concatenate([np.full(N_X, p.eps_n),
                                   np.full(N_SEP, p.eps_sep),
                                   np.full(N_X, p.eps_p)])
        self.eps_b = self.eps ** p.b
        self.cell_n = np.arange(0, N_X)
        self.cell_p = np.arange(2 * N_X, 3 * N_X)
        self.a_f_cell = np.zeros(N_E)
        self.a_f_cell[self.cell_n] = p.a_n * FARADAY
        self.a_f_cell[self.cell_p] = p.a_p * FARADAY
        self.h_face = 0.5 * (self.dx[:-1] + self.dx[1:])
        de_cell = p.D_e * self.eps_b
        self.de_face = (self.dx[:-1] + self.dx[1:]) / (
            self.dx[:-1] / de_cell[:-1] + self.dx[1:] / de_cell[1:])
        self.sig_eff_n = p.sigma_n * p.eps_s_n ** p.b
        self.sig_eff_p = p.sigma_p * p.eps_s_p ** p.b
        self.dx_n = p.L_n / N_X
        self.dx_p = p.L_p / N_X
        # scales making residual components O(1)
        self.i_sc = p.i_1c
        self.j_sc_n = p.i_1c / (FARADAY * p.a_n * p.L_n)
        self.j_sc_p = p.i_1c / (FARADAY * p.a_p * p.L_p)
        self.cd = 2.0 * GAS_CONSTANT * p.T / FARADAY * (1.0 - p.t_plus)
        self.bf = FARADAY / (2.0 * GAS_CONSTANT * p.T)
        self._ops: dict[float, _StepOperator] = {}
        self._const_jac = self._build_constant_blocks()

    def _build_constant_blocks(self):
        j = np.zeros((_N_UNK, _N_UNK))
        # solid-phase charge conservation, negative electrode; the first
        # equation is replaced by the grounding phi_s_n[0] = 0 (the full
        # charge-equation set sums to zero identically, so nothing is lost)
        gn = self.sig_eff_n / self.dx_n / self.i_sc
        blk = np.zeros((N_X, N_X))
        for k in range(1, N_X):
            blk[k, k - 1] -= gn
            blk[k, k] += gn
            if k < N_X - 1:
                blk[k, k] += gn
                blk[k, k + 1] -= gn
        blk[0, 0] = 1.0
        j[_PHI_N, _PHI_N] = blk
        dj = np.full(N_X, self.dx_n * self.params.a_n * FARADAY / self.i_sc)
        dj[0] = 0.0
        j[_PHI_N, _J_N] = np.diag(dj)
        # positive electrode
        gp = self.sig_eff_p / self.dx_p / self.i_sc
        blk = np.zeros((N_X, N_X))
        for k in range(N_X):
            if k > 0:
                blk[k, k - 1] -= gp
                blk[k, k] += gp
            if k < N_X - 1:
                blk[k, k] += gp
                blk[k, k + 1] -= gp
        j[_PHI_P, _PHI_P] = blk
        j[_PHI_P, _J_P] = np.diag(
            np.full(N_X, self.dx_p * self.params.a_p * FARADAY / self.i_sc))
        return j

    def op(self, dt: float) -> _StepOperator:
        key = float(dt)
        if key not in self._ops:
            self._ops[key] = _StepOperator(self, key)
        return self._ops[key]

    # -- initial state -------------------------------------------------------

    def initial_state(self) -> CellState:
        p = self.params
        v0 = p.v_oc_full
        return CellState(
            c_n=np.full((N_X, N_R), p.x_n0),
            c_p=np.full((N_X, N_R), p.x_p0),
            c_e=np.full(N_E, p.c_e0),
            phi_e=np.full(N_E, -float(p.U_n(p.x_n0))),
            phi_s_n=np.zeros(N_X),
            phi_s_p=np.full(N_X, v0),
            V=v0,
            t=0.0,
        )

    # -- residual and Jacobian of the algebraic core --------------------------

    def _eval(self, u, i_app, sbn, sbp, c_base, op):
        p = self.params
        phi_e = u[_PHI_E]
        phi_n = u[_PHI_N]
        phi_p = u[_PHI_P]
        jn = u[_J_N]
        jp = u[_J_P]
        j40 = u[100:140]

        c_e = c_base + op.S @ j40
        ce_ok = c_e > _CE_FLOOR
        c_ev = np.where(ce_ok, c_e, _CE_FLOOR)

        th_n = sbn - op.alpha_n * jn
        th_p = sbp - op.alpha_p * jp
        tn_ok = (th_n > _THETA_FLOOR) & (th_n < 1.0 - _THETA_FLOOR)
        tp_ok = (th_p > _THETA_FLOOR) & (th_p < 1.0 - _THETA_FLOOR)
        th_nv = np.minimum(np.maximum(th_n, _THETA_FLOOR), 1.0 - _THETA_FLOOR)
        th_pv = np.minimum(np.maximum(th_p, _THETA_FLOOR), 1.0 - _THETA_FLOOR)

        kap_cell = np.asarray(p.kappa_e(c_ev)) * self.eps_b
        wl = self.dx[:-1]
        wr = self.dx[1:]
        denom = wl / kap_cell[:-1] + wr / kap_cell[1:]
        kap_face = (wl + wr) / denom

        lnc = np.log(c_ev)
        dphi = (phi_e[1:] - phi_e[:-1]) / self.h_face
        dlnc = (lnc[1:] - lnc[:-1]) / self.h_face
        drive = -dphi + self.cd * dlnc
        iface = kap_face * drive                      # (59,) interior faces

        res = np.empty(_N_UNK)
        j_glob = np.zeros(N_E)
        j_glob[self.cell_n] = jn
        j_glob[self.cell_p] = jp
        flux = np.zeros(N_E + 1)
        flux[1:N_E] = iface
        res[_PHI_E] = (flux[1:] - flux[:-1] - self.dx * self.a_f_cell * j_glob) / self.i_sc

        isn = np.zeros(N_X + 1)
        isn[0] = i_app
        isn[1:N_X] = (-self.sig_eff_n / self.dx_n) * (phi_n[1:] - phi_n[:-1])
        res[_PHI_N] = (isn[1:] - isn[:-1]
                       + self.dx_n * p.a_n * FARADAY * jn) / self.i_sc
        res[60] = phi_n[0]                            # grounding equation

        isp = np.zeros(N_X + 1)
        isp[N_X] = i_app
        isp[1:N_X] = (-self.sig_eff_p / self.dx_p) * (phi_p[1:] - phi_p[:-1])
        res[_PHI_P] = (isp[1:] - isp[:-1]
                       + self.dx_p * p.a_p * FARADAY * jp) / self.i_sc

        u_n = np.asarray(p.U_n(th_nv))
        u_p = np.asarray(p.U_p(th_pv))
        eta_n = phi_n - phi_e[self.cell_n] - u_n
        eta_p = phi_p - phi_e[self.cell_p] - u_p
        g_n = 2.0 * p.k_n * p.c_max_n * np.sqrt(
            c_ev[self.cell_n] * th_nv * (1.0 - th_nv))
        g_p = 2.0 * p.k_p * p.c_max_p * np.sqrt(
            c_ev[self.cell_p] * th_pv * (1.0 - th_pv))
        arg_n = np.minimum(np.maximum(self.bf * eta_n, -_SINH_CAP), _SINH_CAP)
        arg_p = np.minimum(np.maximum(self.bf * eta_p, -_SINH_CAP), _SINH_CAP)
        sh_n, ch_n = np.sinh(arg_n), np.cosh(arg_n)
        sh_p, ch_p = np.sinh(arg_p), np.cosh(arg_p)
        res[_J_N] = (jn - g_n * sh_n) / self.j_sc_n
        res[_J_P] = (jp - g_p * sh_p) / self.j_sc_p

        clip_active = (not ce_ok.all()) or (not tn_ok.all()) or (not tp_ok.all())
        aux = (c_ev, ce_ok, th_nv, th_pv, tn_ok, tp_ok, kap_cell, kap_face,
               drive, g_n, g_p, sh_n, ch_n, sh_p, ch_p)
        return res, clip_active, c_e, aux

    def _jac(self, aux, op):
        """Analytic Jacobian of the algebraic core from residual intermediates."""
        (c_ev, ce_ok, th_nv, th_pv, tn_ok, tp_ok, kap_cell, kap_face,
         drive, g_n, g_p, sh_n, ch_n, sh_p, ch_p) = aux
        p = self.params
        wl = self.dx[:-1]
        wr = self.dx[1:]
        jac = self._const_jac.copy()
        # electrolyte charge wrt phi_e (tridiagonal)
        gphi = kap_face / self.h_face / self.i_sc
        idx = np.arange(N_E - 1)
        jac[idx, idx] += gphi
        jac[idx + 1, idx + 1] += gphi
        jac[idx, idx + 1] -= gphi
        jac[idx + 1, idx] -= gphi

        # electrolyte charge wrt c_e, chained through S to the fluxes
        kp_cell = np.asarray(p.kappa_e.deriv(c_ev)) * self.eps_b * ce_ok
        dkf_dkl = kap_face ** 2 * wl / ((wl + wr) * kap_cell[:-1] ** 2)
        dkf_dkr = kap_face ** 2 * wr / ((wl + wr) * kap_cell[1:] ** 2)
        inv_c = np.where(ce_ok, 1.0 / c_ev, 0.0)
        dif_dcl = dkf_dkl * kp_cell[:-1] * drive \
            - kap_face * self.cd * inv_c[:-1] / self.h_face
        dif_dcr = dkf_dkr * kp_cell[1:] * drive \
            + kap_face * self.cd * inv_c[1:] / self.h_face
        dre_dc = np.zeros((N_E, N_E))
        # res[k] = (flux[k+1] - flux[k])/i_sc; interior face m couples cells m, m+1
        dre_dc[idx, idx] += dif_dcl / self.i_sc       # +flux[m+1] in row m
        dre_dc[idx, idx + 1] += dif_dcr / self.i_sc
        dre_dc[idx + 1, idx] -= dif_dcl / self.i_sc   # -flux[m+1] in row m+1
        dre_dc[idx + 1, idx + 1] -= dif_dcr / self.i_sc
        jac[_PHI_E, 100:140] = dre_dc @ op.S
        cols = np.concatenate([self.cell_n, self.cell_p])
        jac[cols, 100 + np.arange(2 * N_X)] -= (
            self.dx[cols] * self.a_f_cell[cols] / self.i_sc)

        # Butler-Volmer rows
        du_n = np.asarray(p.U_n.deriv(th_nv))
        du_p = np.asarray(p.U_p.deriv(th_pv))
        rows_n = np.arange(100, 120)
        rows_p = np.arange(120, 140)
        dbv_dphis_n = -g_n * ch_n * self.bf / self.j_sc_n
        dbv_dphis_p = -g_p * ch_p * self.bf / self.j_sc_p
        jac[rows_n, np.arange(60, 80)] += dbv_dphis_n
        jac[rows_p, np.arange(80, 100)] += dbv_dphis_p
        jac[rows_n, self.cell_n] += -dbv_dphis_n
        jac[rows_p, self.cell_p] += -dbv_dphis_p
        dg_dth_n = g_n * (1.0 - 2.0 * th_nv) / (2.0 * th_nv * (1.0 - th_nv))
        dg_dth_p = g_p * (1.0 - 2.0 * th_pv) / (2.0 * th_pv * (1.0 - th_pv))
        dbv_dth_n = (-dg_dth_n * sh_n + g_n * ch_n * self.bf * du_n) / self.j_sc_n
        dbv_dth_p = (-dg_dth_p * sh_p + g_p * ch_p * self.bf * du_p) / self.j_sc_p
        diag_n = 1.0 / self.j_sc_n - dbv_dth_n * op.alpha_n * tn_ok
        diag_p = 1.0 / self.j_sc_p - dbv_dth_p * op.alpha_p * tp_ok
        jac[rows_n, rows_n] += diag_n
        jac[rows_p, rows_p] += diag_p
        dbv_dce_n = -(g_n * 0.5 * inv_c[self.cell_n]) * sh_n / self.j_sc_n
        dbv_dce_p = -(g_p * 0.5 * inv_c[self.cell_p]) * sh_p / self.j_sc_p
        jac[rows_n.reshape(-1, 1), np.arange(100, 140)] += (
            dbv_dce_n[:, None] * op.S[self.cell_n, :])
        jac[rows_p.reshape(-1, 1), np.arange(100, 140)] += (
            dbv_dce_p[:, None] * op.S[self.cell_p, :])
        return jac

    # -- one implicit Euler attempt -------------------------------------------

    def _advance(self, state: CellState, i_app: float, dt: float,
                 ws: "_Workspace") -> CellState:
        op = self.op(dt)
        sbn = state.c_n @ op.P_sn[-1]
        sbp = state.c_p @ op.P_sp[-1]
        c_base = op.P_e @ state.c_e

        u = np.empty(_N_UNK)
        u[_PHI_E] = state.phi_e
        u[_PHI_N] = state.phi_s_n
        u[_PHI_P] = state.phi_s_p
        if ws.j40 is not None:
            u[100:140] = ws.j40
        else:
            u[_J_N], u[_J_P] = self._flux_guess(state, op)
        if ws.u_prev is not None and ws.u_prev2 is not None and ws.dt_prev == dt:
            # linear predictor over the last two accepted steps
            u = u + (ws.u_prev - ws.u_prev2)

        res, clip, c_e, aux = self._eval(u, i_app, sbn, sbp, c_base, op)
        rn = np.max(np.abs(res))
        it = 0
        while rn > _NEWTON_TOL:
            it += 1
            if it > _NEWTON_MAXIT:
                raise _NewtonFail(rn)
            if ws.lu is None or ws.refactor:
                ws.lu = lu_factor(self._jac(aux, op), check_finite=False)
                ws.refactor = False
                ws.stale = 0
            du = -lu_solve(ws.lu, res, check_finite=False)
            # trust region: cap the surface-stoichiometry move per iteration,
            # the Butler-Volmer term is violently nonlinear near depletion
            th_move = max(op.alpha_n * np.abs(du[_J_N]).max(),
                          op.alpha_p * np.abs(du[_J_P]).max())
            if th_move > 0.05:
                du *= 0.05 / th_move
            lam = 1.0
            accepted = False
            for _ in range(8):
                u_try = u + lam * du
                res_t, clip_t, ce_t, aux_t = self._eval(
                    u_try, i_app, sbn, sbp, c_base, op)
                rn_t = np.max(np.abs(res_t))
                if np.isfinite(rn_t) and (rn_t < rn or rn_t <= _NEWTON_TOL):
                    accepted = True
                    break
                lam *= 0.5
            if not accepted:
                if ws.stale > 0:
                    ws.refactor = True
                    continue
                raise _NewtonFail(rn)
            ratio = rn_t / rn if rn > 0 else 0.0
            u, res, rn, clip, c_e, aux = u_try, res_t, rn_t, clip_t, ce_t, aux_t
            ws.stale += 1
            if rn > _NEWTON_TOL and (ratio > 0.1 or ws.stale > 12):
                ws.refactor = True

        if clip:
            raise PhysicalityError(
                f"converged step leaves the admissible region at t={state.t + dt:.3f}s "
                "(electrolyte or surface concentration pinned at its bound)")

        jn = u[_J_N]
        jp = u[_J_P]
        c_n = state.c_n @ op.P_sn.T - np.outer(jn, op.w_sn) / self.params.c_max_n
        c_p = state.c_p @ op.P_sp.T - np.outer(jp, op.w_sp) / self.params.c_max_p
        bad_n = max(-c_n.min(), c_n.max() - 1.0)
        bad_p = max(-c_p.min(), c_p.max() - 1.0)
        if bad_n > 1e-6 or bad_p > 1e-6:
            raise PhysicalityError(
                f"solid concentration left [0, c_max] by {max(bad_n, bad_p):.2e} "
                f"(scaled) at t={state.t + dt:.3f}s")
        if c_e.min() <= 0.0:
            raise PhysicalityError(
                f"electrolyte depleted (min {c_e.min():.3e} mol/m^3) at t={state.t + dt:.3f}s")
        ws.j40 = u[100:140].copy()
        ws.u_prev2 = ws.u_prev if ws.dt_prev == dt else None
        ws.u_prev = u.copy()
        ws.dt_prev = dt
        v = (u[_PHI_P][-1] - i_app * self.dx_p / (2.0 * self.sig_eff_p)
             - (u[_PHI_N][0] + i_app * self.dx_n / (2.0 * self.sig_eff_n)))
        return CellState(
            c_n=np.clip(c_n, 0.0, 1.0), c_p=np.clip(c_p, 0.0, 1.0), c_e=c_e,
            phi_e=u[_PHI_E].copy(), phi_s_n=u[_PHI_N].copy(),
            phi_s_p=u[_PHI_P].copy(), V=float(v), t=state.t + dt)

    def _flux_guess(self, state: CellState, op: _StepOperator):
        """Cold-start flux estimate: damped fixed point of the per-cell
        Butler-Volmer relation with the flux-corrected surface value."""
        p = self.params
        ce = np.maximum(state.c_e, _CE_FLOOR)
        jn = np.zeros(N_X)
        jp = np.zeros(N_X)
        for _ in range(4):
            th_n = np.clip(state.c_n[:, -1] - op.alpha_n * jn,
                           _THETA_FLOOR, 1 - _THETA_FLOOR)
            th_p = np.clip(state.c_p[:, -1] - op.alpha_p * jp,
                           _THETA_FLOOR, 1 - _THETA_FLOOR)
            eta_n = state.phi_s_n - state.phi_e[self.cell_n] - np.asarray(p.U_n(th_n))
            eta_p = state.phi_s_p - state.phi_e[self.cell_p] - np.asarray(p.U_p(th_p))
            g_n = 2.0 * p.k_n * p.c_max_n * np.sqrt(ce[self.cell_n] * th_n * (1 - th_n))
            g_p = 2.0 * p.k_p * p.c_max_p * np.sqrt(ce[self.cell_p] * th_p * (1 - th_p))
            jn = 0.5 * jn + 0.5 * g_n * np.sinh(np.clip(self.bf * eta_n, -_SINH_CAP, _SINH_CAP))
            jp = 0.5 * jp + 0.5 * g_p * np.sinh(np.clip(self.bf * eta_p, -_SINH_CAP, _SINH_CAP))
        return jn, jp

    # -- robust stepping with the halving ladder -------------------------------

    def step(self, state: CellState, i_start: float, i_end: float, dt: float,
             ws: "_Workspace" = None):
        """Advance one step of ``dt`` seconds (C-rates ``i_start``..``i_end``).

        Returns the new CellState, or a FailureEvent if the voltage crosses
        the cutoff inside the step.  Newton failures trigger halved retries
        down to 1/16 s before raising SolverError.
        """
        if dt <= 0:
            raise ValueError("dt must be positive")
        if ws is None:
            ws = _Workspace()
        return self._robust_step(state, float(i_start), float(i_end), float(dt), ws)

    def _robust_step(self, state, c_start, c_end, dt, ws):
        try:
            new = self._advance(state, self.params.current_density(c_end), dt, ws)
        except _NewtonFail as nf:
            if dt / 2.0 < _MIN_DT * (1.0 - 1e-12):
                raise SolverError("Newton did not converge at the minimum step size",
                                  residual=float(nf.residual), time=state.t) from None
            ws.refactor = True
            c_mid = 0.5 * (c_start + c_end)
            first = self._robust_step(state, c_start, c_mid, dt / 2.0, ws)
            if isinstance(first, FailureEvent):
                return first
            return self._robust_step(first, c_mid, c_end, dt / 2.0, ws)
        v_cut = self.params.V_cut
        if new.V <= v_cut:
            lam = (state.V - v_cut) / (state.V - new.V)
            term = CellState(
                c_n=state.c_n + lam * (new.c_n - state.c_n),
                c_p=state.c_p + lam * (new.c_p - state.c_p),
                c_e=state.c_e + lam * (new.c_e - state.c_e),
                phi_e=state.phi_e + lam * (new.phi_e - state.phi_e),
                phi_s_n=state.phi_s_n + lam * (new.phi_s_n - state.phi_s_n),
                phi_s_p=state.phi_s_p + lam * (new.phi_s_p - state.phi_s_p),
                V=v_cut, t=state.t + lam * dt)
            return FailureEvent(state=term, time=term.t)
        return new


@dataclass
class _Workspace:
    """Per-run Newton bookkeeping: a reusable LU preconditioner plus the last
    two converged solutions for warm starts and linear prediction."""

    lu: tuple | None = None
    refactor: bool = False
    stale: int = 0
    j40: np.ndarray | None = None
    u_prev: np.ndarray | None = None
    u_prev2: np.ndarray | None = None
    dt_prev: float | None = None


# -- public module-level operations -------------------------------------------


_SIM_CACHE: "weakref.WeakKeyDictionary[ParameterSet, Simulator]" = weakref.WeakKeyDictionary()


def _simulator_for(params: ParameterSet) -> Simulator:
    sim = _SIM_CACHE.get(params)
    if sim is None:
        sim = Simulator(params)
        _SIM_CACHE[params] = sim
    return sim


def init_full_charge(params: ParameterSet) -> CellState:
    """Uniform fully-charged state with zero-current-consistent potentials."""
    return _simulator_for(params).initial_state()


def step(state: CellState, i_start: float, i_end: float, dt: float,
         params: ParameterSet):
    """One implicit time step; see Simulator.step."""
    return Simulator(params).step(state, i_start, i_end, dt)


def simulate_currents(params: ParameterSet, currents, dt_internal: float = 1.0,
                      window: float = 100.0) -> SimOutcome:
    """Run a piecewise-linear current demand, recording every ``window`` s.

    ``currents`` are C-rate breakpoints, one per window boundary.  Stops at
    the cutoff crossing or the end of the demand; deterministic for fixed
    inputs.
    """
    currents = np.asarray(currents, dtype=float)
    if currents.ndim != 1 or currents.size < 2:
        raise ValueError("need at least two current breakpoints")
    if np.any(currents < 0):
        raise ValueError("discharge currents must be non-negative")
    n_sub = window / dt_internal
    if abs(n_sub - round(n_sub)) > 1e-9:
        raise ValueError("dt_internal must divide the 100 s window")
    n_sub = int(round(n_sub))

    sim = Simulator(params)
    ws = _Workspace()
    state = sim.initial_state()
    trajectory = [state]
    for w in range(currents.size - 1):
        c0, c1 = currents[w], currents[w + 1]
        for s in range(n_sub):
            f0 = s / n_sub
            f1 = (s + 1) / n_sub
            cs = c0 + (c1 - c0) * f0
            ce = c0 + (c1 - c0) * f1
            try:
                out = sim._robust_step(state, cs, ce, dt_internal, ws)
            except SolverError as exc:
                raise SolverError(f"simulation failed in window {w}: {exc}",
                                  residual=exc.residual, time=state.t) from exc
            if isinstance(out, FailureEvent):
                trajectory.append(out.state)
                t_fail = out.time
                fw = int(np.ceil(t_fail / window)) - 1
                return SimOutcome(trajectory=trajectory, failed=True,
                                  failure_time=t_fail, failure_window=max(fw, 0))
            state = out
        trajectory.append(state)
    return SimOutcome(trajectory=trajectory, failed=False)


def simulate_cycle(params: ParameterSet, cycle, dt_internal: float = 1.0) -> SimOutcome:
    """Simulate a drive cycle (anything exposing ``currents``) from full charge."""
    currents = getattr(cycle, "currents", cycle)
    return simulate_currents(params, currents, dt_internal=dt_internal)


def max_sustained_crate(params: ParameterSet, duration: float,
                        tol: float = 0.01) -> float:
    """Largest constant C-rate a fresh cell survives for ``duration`` seconds.

    Bisection on simulate outcomes; resolution ``tol`` C.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n_windows = max(int(np.ceil(duration / 100.0)), 1)

    def survives(crate):
        out = simulate_currents(params, np.full(n_windows + 1, crate))
        return (not out.failed) or out.failure_time > duration

    lo, hi = 0.05, 8.0
    if not survives(lo):
        return 0.0
    while survives(hi):
        lo = hi
        hi *= 1.3
        if hi > 40.0:
            return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if survives(mid):
            lo = mid
        else:
            hi = mid
    return lo


def lithium_total(params: ParameterSet, state: CellState) -> float:
    """Total lithium inventory (mol): shell-volume-weighted solid + electrolyte."""
    p = params
    out = 0.0
    for grid, c_max, radius, eps_s, length in (
            (state.c_n, p.c_max_n, p.R_n, p.eps_s_n, p.L_n),
            (state.c_p, p.c_max_p, p.R_p, p.eps_s_p, p.L_p)):
        dr = radius / N_R
        r_f = dr * np.arange(N_R + 1)
        v_sh = np.diff(r_f ** 3)          # proportional to shell volumes
        mean_theta = grid @ v_sh / v_sh.sum()
        out += length / N_X * eps_s * c_max * mean_theta.sum()
    sim_dx = np.concatenate([np.full(N_X, p.L_n / N_X),
                             np.full(N_SEP, p.L_sep / N_SEP),
                             np.full(N_X, p.L_p / N_X)])
    sim_eps = np.concatenate([np.full(N_X, p.eps_n),
                              np.full(N_SEP, p.eps_sep),
                              np.full(N_X, p.eps_p)])
    out += float(np.sum(sim_dx * sim_eps * state.c_e))
    return out * p.A_cell


def electrode_lithium(params: ParameterSet, state: CellState, electrode: str) -> float:
    """Solid lithium in one electrode (mol)."""
    p = params
    if electrode == "n":
        grid, c_max, radius, eps_s, length = state.c_n, p.c_max_n, p.R_n, p.eps_s_n, p.L_n
    else:
        grid, c_max, radius, eps_s, length = state.c_p, p.c_max_p, p.R_p, p.eps_s_p, p.L_p
    dr = radius / N_R
    r_f = dr * np.arange(N_R + 1)
    v_sh = np.diff(r_f ** 3)
    mean_theta = grid @ v_sh / v_sh.sum()
    return float(length / N_X * eps_s * c_max * mean_theta.sum() * p.A_cell)
