"""Full-frame receiver: finds every active RE, rebuilds the counter layout
and decodes the allocation.

Shifted stop bits leak into each other's observation patches, so a
per-slot detector alone is not exact even without noise. The receiver
therefore runs a greedy pursuit over all REs with a known atom count,
cancels each found pulse from the residual, and re-fits every atom with
all others cancelled until the assignment stops changing. With the stop
REs known, the layout gives the permutation and repetition REs, which are
then decided with structure: an assignment problem for the permutation
block and coherent combining across copies for every stop bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .codec import FrameConfig, allocation_from_parts, decode_frame, join_extra
from .errors import MalformedFrameError, StartStopError
from .grid import GridDims, boost_amplitude, layout_frame, skip_region
from .modem import (FrameWaveform, OfdmParams, ShiftSteps, TemplateBank, bin_of,
                    decide, default_steps, demodulate)
from .qam import constellation, slice_symbols


@dataclass
class Atom:
    sc: int
    sym: int
    h: int
    c: complex

    @property
    def re(self):
        return (self.sc, self.sym)


@dataclass
class FrameDecision:
    messages: object = None
    extras: list = None
    allocation: object = None
    atoms: list = field(default_factory=list)
    ok: bool = True
    reason: str = ""
    ambiguous: bool = False


class FrameReceiver:
    def __init__(self, cfg: FrameConfig, dims: GridDims, params: OfdmParams | None = None,
                 steps: ShiftSteps | None = None, n_loaded: int | None = None,
                 threshold: float = 0.5, max_sweeps: int = 30, max_reseeds: int = 4):
        self.cfg = cfg
        self.dims = dims
        self.params = params or OfdmParams()
        self.steps = steps or default_steps(cfg, self.params)
        self.bank = TemplateBank(cfg, self.params, self.steps, width=2)
        self.bank_first = TemplateBank(cfg, self.params, self.steps, width=64)
        n_loaded = (1 << cfg.n_bits) if n_loaded is None else n_loaded
        self.gain = boost_amplitude(n_loaded, cfg.n_active)
        self.threshold = threshold
        self._region = dims.n_res  # atoms may only move to REs before this index
        self.max_sweeps = max_sweeps
        self.max_reseeds = max_reseeds
        dims.check_fits(cfg)
        res = [(sc, sym) for sym in range(dims.n_symbols) for sc in range(dims.n_subcarriers)
               if (sc, sym) not in dims.reserved]
        self.cand_sc = np.array([r[0] for r in res])
        self.cand_sym = np.array([r[1] for r in res])
        self.cand_k = bin_of(self.cand_sc, dims.n_subcarriers)
        self._points = np.append(constellation(cfg.qam_bits), 1.0)
        # energy of the faintest pulse the receiver must see: smallest QAM
        # point, largest shift in the first symbol (head lost)
        self._weakest = (self.gain**2 * float(np.min(np.abs(constellation(cfg.qam_bits)))) ** 2
                         * float(np.min(self.bank.e_own)))

    # -- residual bookkeeping -------------------------------------------------

    def _apply(self, resid, atom, sign):
        k = int(bin_of(atom.sc, self.dims.n_subcarriers))
        prev, own = self.bank.response(atom.h, k)
        resid[:, atom.sym] += sign * atom.c * own
        if atom.sym > 0:
            resid[:, atom.sym - 1] += sign * atom.c * prev

    def _scores(self, resid, idx):
        inner, energy, _ = self.bank.correlate(resid, self.cand_k[idx], self.cand_sym[idx])
        return inner, energy

    def _best_at(self, resid, res):
        sc = np.array([r[0] for r in res])
        sym = np.array([r[1] for r in res])
        # first-symbol pulses have no previous window and can be spread
        # much wider than a normal patch
        bank = self.bank_first if np.any(sym == 0) else self.bank
        inner, energy, _ = bank.correlate(resid, bin_of(sc, self.dims.n_subcarriers), sym)
        captured = np.abs(inner) ** 2 / energy
        i, h = np.unravel_index(np.argmax(captured), captured.shape)
        return Atom(int(sc[i]), int(sym[i]), int(h), complex(inner[i, h] / energy[i, h]))

    # -- stage 1: pursuit + refinement ---------------------------------------

    def pursue(self, y, n_atoms, limit=None):
        """Greedy matching pursuit over the first ``limit`` candidate REs."""
        limit = self.cand_sc.size if limit is None else limit
        cand_sym = self.cand_sym[:limit]
        resid = y.copy()
        inner, energy = self._scores(resid, np.arange(limit))
        captured = np.abs(inner) ** 2 / energy
        atoms = []
        for _ in range(n_atoms):
            i, h = np.unravel_index(np.argmax(captured), captured.shape)
            atom = Atom(int(self.cand_sc[i]), int(self.cand_sym[i]), int(h),
                        complex(inner[i, h] / energy[i, h]))
            atoms.append(atom)
            self._apply(resid, atom, -1)
            touched = np.flatnonzero(np.abs(cand_sym - atom.sym - 0.5) <= 1.5)
            ti, te = self._scores(resid, touched)
            inner[touched], energy[touched] = ti, te
            captured[touched] = np.abs(ti) ** 2 / te
        return atoms, resid

    def _neighbourhood(self, atom):
        out = []
        for dsym in (-1, 0, 1):
            for dsc in (-1, 0, 1):
                re = (atom.sc + dsc, atom.sym + dsym)
                if (0 <= re[0] < self.dims.n_subcarriers and 0 <= re[1] < self.dims.n_symbols
                        and re not in self.dims.reserved and self.dims.linear(re) < self._region):
                    out.append(re)
        return out

    def refine(self, atoms, resid, tol=1e-10):
        """Cyclic re-fit of every atom against the others until the
        assignment is stable and gains have converged."""
        for _ in range(self.max_sweeps):
            changed = False
            drift = 0.0
            for j, atom in enumerate(atoms):
                self._apply(resid, atom, +1)
                new = self._best_at(resid, self._neighbourhood(atom))
                if (new.sc, new.sym, new.h) != (atom.sc, atom.sym, atom.h):
                    changed = True
                drift = max(drift, abs(new.c - atom.c))
                atoms[j] = new
                self._apply(resid, new, -1)
            if not changed and drift <= tol * self.gain:
                break
        return atoms

    def _prune(self, atoms, resid):
        live = []
        for a in atoms:
            if self._is_active(a):
                live.append(a)
            else:
                self._apply(resid, a, +1)
        return live

    def _is_active(self, atom):
        c = atom.c / self.gain
        point = self._points[np.argmin(np.abs(self._points - c))]
        return np.real(np.conj(point) * c) >= self.threshold * abs(point) ** 2

    # -- stage 2: collisions ---------------------------------------------------

    def _templates(self, atom_re, bins, syms):
        """Exact responses of every hypothesis at ``atom_re`` over a window of
        bins and symbols, shape ``(H, len(syms) * len(bins))``."""
        bank = self.bank
        sc, sym = atom_re
        k = int(bin_of(sc, self.dims.n_subcarriers))
        ph_prev, ph_own = bank.phases([k])
        t_prev, t_own = bank.wide(np.asarray(bins) - k)
        out = np.zeros((bank.size, len(syms), len(bins)), dtype=complex)
        out[:, syms.index(sym)] = t_own * ph_own[0][:, None]
        if sym > 0 and sym - 1 in syms:
            out[:, syms.index(sym - 1)] = t_prev * ph_prev[0][:, None]
        return out.reshape(bank.size, -1)

    def _window(self, first, second):
        w = self.bank.width
        ks = [int(bin_of(a.sc, self.dims.n_subcarriers)) for a in (first, second)]
        bins = list(range(min(ks) - w, max(ks) + w + 1))
        syms = list(range(max(min(first.sym, second.sym) - 1, 0), max(first.sym, second.sym) + 1))
        n = self.params.n_fft
        return bins, syms, np.ix_([b % n for b in bins], syms)

    def _pair_fit(self, resid, first, second):
        """Exhaustive joint least-squares fit of two interacting atoms.

        Both atoms are re-placed on their REs with every pair of shift
        hypotheses; the pair capturing the most energy of the shared
        observation window wins.
        """
        for a in (first, second):
            self._apply(resid, a, +1)
        bins, syms, where = self._window(first, second)
        y = resid[where].T.reshape(-1)
        t1 = self._templates(first.re, bins, syms)
        t2 = t1 if first.re == second.re else self._templates(second.re, bins, syms)
        g1 = np.sum(np.abs(t1) ** 2, axis=1)
        g2 = np.sum(np.abs(t2) ** 2, axis=1)
        cross = t1.conj() @ t2.T
        b1 = t1.conj() @ y
        b2 = t2.conj() @ y
        det = g1[:, None] * g2[None, :] - np.abs(cross) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            # captured energy of the projection onto span{t1_i, t2_j}
            num = (g2[None, :] * np.abs(b1[:, None]) ** 2 + g1[:, None] * np.abs(b2[None, :]) ** 2
                   - 2 * np.real(np.conj(b1[:, None]) * cross * b2[None, :]))
            fit = np.where(det > 1e-9 * g1[:, None] * g2[None, :], num / det, -np.inf)
        i, j = np.unravel_index(np.argmax(fit), fit.shape)
        if not np.isfinite(fit[i, j]):
            # no two distinct pulses fit here (single hypothesis on one RE)
            for a in (first, second):
                self._apply(resid, a, -1)
            return first, second
        d = det[i, j]
        c1 = (g2[j] * b1[i] - cross[i, j] * b2[j]) / d
        c2 = (g1[i] * b2[j] - np.conj(cross[i, j]) * b1[i]) / d
        new = (Atom(first.sc, first.sym, int(i), complex(c1)),
               Atom(second.sc, second.sym, int(j), complex(c2)))
        for a in new:
            self._apply(resid, a, -1)
        return new

    def _noise_floor(self, resid):
        """Per-bin noise variance estimated from the median residual power in
        the occupied band (exponential median is ``sigma**2 * ln 2``)."""
        band = bin_of(np.arange(self.dims.n_subcarriers), self.dims.n_subcarriers) % self.params.n_fft
        return float(np.median(np.abs(resid[band]) ** 2)) / np.log(2)

    def _split(self, resid, atom):
        """Best two-pulse explanation of one atom's RE; returns the new atoms,
        the residual after the fit and the residual energy removed."""
        local = resid.copy()
        pair = self._pair_fit(local, atom, Atom(atom.sc, atom.sym, atom.h, 0j))
        gain = float(np.sum(np.abs(resid) ** 2) - np.sum(np.abs(local) ** 2))
        return list(pair), local, gain

    def _interacting(self, a, b):
        if a.re == b.re:
            return True
        if a.h == 0 and b.h == 0:
            # unshifted pulses on distinct REs are orthogonal
            return False
        return abs(a.sym - b.sym) <= 1 and abs(a.sc - b.sc) <= 2 * self.bank.width

    def _joint_sweeps(self, atoms, resid, max_rounds=6):
        """Alternate pairwise joint fits and single-atom refinement.

        Coordinate descent over single atoms can stall when two nearby
        pulses have traded shift hypotheses; a joint fit of the pair
        escapes that configuration.
        """
        for _ in range(max_rounds):
            before = [(a.sc, a.sym, a.h) for a in atoms]
            floor = self._noise_floor(resid)
            fitted = False
            for i in range(len(atoms)):
                for j in range(i + 1, len(atoms)):
                    a, b = atoms[i], atoms[j]
                    if not self._interacting(a, b):
                        continue
                    _, _, where = self._window(a, b)
                    excess = np.sum(np.abs(resid[where]) ** 2)
                    # a pair explaining its window down to the noise is left alone
                    if excess <= 4 * resid[where].size * floor + 1e-12 * self.gain**2:
                        continue
                    atoms[i], atoms[j] = self._pair_fit(resid, a, b)
                    fitted = True
            if not fitted:
                break
            atoms = self.refine(atoms, resid)
            if [(a.sc, a.sym, a.h) for a in atoms] == before:
                break
        return atoms

    # -- stage 3: structure ------------------------------------------------------

    def _stop_res(self, atoms):
        """Walk the counter region and return (slot, RE) per detected stop RE."""
        cfg, dims = self.cfg, self.dims
        at = {}
        for a in atoms:
            at.setdefault(dims.linear(a.re), []).append(a)
        limit = 1 << cfg.n_bits
        blocked = np.zeros(dims.n_res, dtype=bool)
        for re in dims.reserved:
            blocked[dims.linear(re)] = True
        stops = []
        slot = 0
        for pos in range(dims.n_res):
            if slot >= limit:
                break
            if blocked[pos]:
                continue
            if pos in at:
                stops.append((slot, dims.unlinear(pos)))
                if cfg.tsfs_enabled:
                    for re in skip_region(dims.unlinear(pos), dims):
                        idx = dims.linear(re)
                        if idx > pos:
                            blocked[idx] = True
            slot += 1
        return stops

    def _energy(self, resid):
        return float(np.sum(np.abs(resid) ** 2))

    def _eliminate(self, atoms, resid):
        """Drop atoms sharing an RE whose work the remaining atoms can take
        over: remove one, re-fit its neighbours, and keep the removal when
        the residual grows by less than a quarter of the weakest possible
        pulse. Frees atom budget that a spurious pair had claimed."""
        i = 0
        while i < len(atoms):
            atom = atoms[i]
            if sum(a.re == atom.re for a in atoms) < 2:
                i += 1
                continue
            trial_resid = resid.copy()
            self._apply(trial_resid, atom, +1)
            rest = atoms[:i] + atoms[i + 1:]
            near = [j for j, a in enumerate(rest) if self._interacting(a, atom)]
            refit = self.refine([rest[j] for j in near], trial_resid)
            for j, a in zip(near, refit):
                rest[j] = a
            if self._energy(trial_resid) - self._energy(resid) < 0.25 * self._weakest:
                atoms, resid[:] = rest, trial_resid
            else:
                i += 1
        return atoms

    def _excess(self, resid, atom, floor):
        _, _, where = self._window(atom, atom)
        local = resid[where]
        return np.sum(np.abs(local) ** 2) > 4 * local.size * floor + 0.25 * self._weakest

    def _split_pass(self, atoms, resid):
        """Split single atoms that leave unexplained energy around them into
        two pulses on the same RE when both halves are active."""
        floor = self._noise_floor(resid)
        out = []
        for atom in atoms:
            if (sum(a.re == atom.re for a in atoms) == 1 and self._excess(resid, atom, floor)):
                pair, local, gain = self._split(resid, atom)
                if gain > 0.25 * self._weakest and all(self._is_active(a) for a in pair):
                    resid[:] = local
                    out.extend(pair)
                    continue
            out.append(atom)
        return out

    def _removal_cost(self, atoms, resid, i):
        trial_resid = resid.copy()
        self._apply(trial_resid, atoms[i], +1)
        rest = atoms[:i] + atoms[i + 1:]
        near = [j for j, a in enumerate(rest) if self._interacting(a, atoms[i])]
        for j, a in zip(near, self.refine([rest[j] for j in near], trial_resid)):
            rest[j] = a
        return self._energy(trial_resid) - self._energy(resid), rest, trial_resid

    def _trim(self, atoms, resid, n_atoms):
        """Remove the cheapest atoms until at most ``n_atoms`` remain."""
        while len(atoms) > n_atoms:
            best = min((self._removal_cost(atoms, resid, i) for i in range(len(atoms))),
                       key=lambda t: t[0])
            _, atoms, trial_resid = best
            resid[:] = trial_resid
        return atoms

    def _fit_atoms(self, y, n_atoms=None, limit=None):
        """Greedy pursuit with refinement and pruning, repeated until the atom set is stable."""
        n_atoms = self.cfg.n_active if n_atoms is None else n_atoms
        if limit is not None:
            self._region = self.dims.linear((self.cand_sc[limit - 1], self.cand_sym[limit - 1])) + 1
        try:
            return self._fit_region(y, n_atoms, limit)
        finally:
            self._region = self.dims.n_res

    def _band_excess(self, resid):
        """Residual energy in the occupied band beyond what noise explains."""
        band = bin_of(np.arange(self.dims.n_subcarriers), self.dims.n_subcarriers) % self.params.n_fft
        cells = resid[band]
        floor = self._noise_floor(resid)
        return float(np.sum(np.abs(cells) ** 2) - cells.size * floor - 4 * np.sqrt(cells.size) * floor)

    def _global_best(self, resid, limit=None):
        """Exact matched-filter search over all candidate REs; returns the
        best single atom and the residual energy it would remove."""
        limit = self.cand_sc.size if limit is None else limit
        best, best_gain = None, 0.0
        for sym in np.unique(self.cand_sym[:limit]):
            idx = np.flatnonzero(self.cand_sym[:limit] == sym)
            inner, energy = self.bank.matched(resid, self.cand_k[idx], int(sym))
            captured = np.abs(inner) ** 2 / energy[:, None]
            h, i = np.unravel_index(np.argmax(captured), captured.shape)
            if captured[h, i] > best_gain:
                best_gain = float(captured[h, i])
                best = Atom(int(self.cand_sc[idx[i]]), int(sym), int(h),
                            complex(inner[h, i] / energy[h]))
        return best, best_gain

    def _swap_pass(self, atoms, resid, n_atoms, limit=None, tries=3):
        """Pulses shifted by most of a symbol keep only a short, spectrally
        wide piece in the first symbol; the patch scores barely see them
        and spurious atoms can take their place. While the residual holds
        more than noise, one or two of the cheapest atoms are replaced by
        the exact best new atoms if that lowers the residual."""
        for _ in range(n_atoms):
            if self._band_excess(resid) < 0.5 * self._weakest:
                break
            energy = self._energy(resid)
            for trial, trial_resid in self._swaps(atoms, resid, n_atoms, limit, tries):
                if self._energy(trial_resid) < energy - 0.25 * self._weakest:
                    atoms, resid[:] = trial, trial_resid
                    break
            else:
                break
        return atoms

    def _swaps(self, atoms, resid, n_atoms, limit, tries):
        """Candidate atom sets, lazily: drop ``k`` cheap atoms, add ``k``
        (or fill the budget) greedily from the exact search."""
        for k in (1, 2):
            if len(atoms) < n_atoms:
                starts = [(list(atoms), resid.copy())]
                k = n_atoms - len(atoms)
            elif k == 1:
                costs = sorted((self._removal_cost(atoms, resid, i) for i in range(len(atoms))),
                               key=lambda t: t[0])
                starts = [(rest, r) for _, rest, r in costs[:tries]]
            else:
                rest, r = list(atoms), resid.copy()
                for _ in range(k):
                    _, rest, r = min((self._removal_cost(rest, r, i) for i in range(len(rest))),
                                     key=lambda t: t[0])
                starts = [(rest, r)]
            for rest, trial_resid in starts:
                for _ in range(k):
                    cand, gain = self._global_best(trial_resid, limit)
                    if cand is None or gain < 0.25 * self._weakest:
                        break
                    self._apply(trial_resid, cand, -1)
                    rest = self.refine(rest + [cand], trial_resid)
                yield self._prune(rest, trial_resid), trial_resid
            if len(atoms) < n_atoms:
                return

    def _cluster_fit(self, atoms, base, cols):
        """Least-squares gains of ``atoms`` (hypotheses fixed) against ``base``
        over symbol columns ``cols``; returns the atoms and the residual."""
        if not atoms:
            return [], base.copy()
        shape = (self.params.n_fft, self.dims.n_symbols)
        mats = []
        for a in atoms:
            t = np.zeros(shape, dtype=complex)
            self._apply(t, Atom(a.sc, a.sym, a.h, 1.0), +1)
            mats.append(t[:, cols].reshape(-1))
        mats = np.array(mats).T
        c, *_ = np.linalg.lstsq(mats, base[:, cols].reshape(-1), rcond=None)
        fitted = [Atom(a.sc, a.sym, a.h, complex(g)) for a, g in zip(atoms, c)]
        resid = base.copy()
        for a in fitted:
            self._apply(resid, a, -1)
        return fitted, resid

    def _projected_best(self, atom, others, base, cols, span):
        """Best hypothesis near ``atom`` once the span of ``others`` is
        projected out: exact orthogonal least squares over all shifts."""
        shape = (self.params.n_fft, self.dims.n_symbols)
        basis = []
        if others:
            mats = []
            for o in others:
                t = np.zeros(shape, dtype=complex)
                self._apply(t, Atom(o.sc, o.sym, o.h, 1.0), +1)
                mats.append(t[:, cols].reshape(-1))
            q, _ = np.linalg.qr(np.array(mats).T)
            for v in q.T:
                full = np.zeros(shape, dtype=complex)
                full[:, cols] = v.reshape(self.params.n_fft, len(cols))
                basis.append(full)
        flat = base[:, cols].reshape(-1)
        for v in basis:
            flat = flat - v[:, cols].reshape(-1) * np.vdot(v[:, cols].reshape(-1), flat)
        r = np.zeros(shape, dtype=complex)
        r[:, cols] = flat.reshape(self.params.n_fft, len(cols))
        best, best_score = atom, -1.0
        for sym, sc in span:
            ks = bin_of(sc, self.dims.n_subcarriers)
            inner, energy = self.bank.matched(r, ks, sym)
            energy = np.broadcast_to(energy[:, None], inner.shape).copy()
            for v in basis:
                vi, _ = self.bank.matched(v, ks, sym)
                energy -= np.abs(vi) ** 2
            score = np.abs(inner) ** 2 / np.maximum(energy, 1e-12 * float(np.max(energy)))
            h, i = np.unravel_index(np.argmax(score), score.shape)
            if score[h, i] > best_score:
                best, best_score = Atom(int(sc[i]), sym, int(h), 0j), float(score[h, i])
        return best

    def _exact_templates(self, atom, hyps, cols):
        """Full-length responses of hypotheses ``hyps`` at ``atom``'s RE,
        restricted to symbol columns ``cols``; shape ``(len(hyps), n * len(cols))``."""
        n = self.params.n_fft
        k = int(bin_of(atom.sc, self.dims.n_subcarriers))
        out = np.zeros((len(hyps), n, len(cols)), dtype=complex)
        for row, h in enumerate(hyps):
            prev, own = self.bank.response(int(h), k)
            if atom.sym in cols:
                out[row, :, cols.index(atom.sym)] = own
            if atom.sym - 1 in cols:
                out[row, :, cols.index(atom.sym - 1)] = prev
        return out.reshape(len(hyps), -1)

    def _pair_move(self, first, second, others, base, cols, top=32):
        """Joint best hypotheses of two atoms on their REs with ``others``
        projected out; candidates are each atom's ``top`` single scores."""
        mats = [self._exact_templates(o, [o.h], cols)[0] for o in others]
        q = np.linalg.qr(np.array(mats).T)[0] if mats else np.zeros((base[:, cols].size, 0))

        def perp(v):
            return v - q @ (q.conj().T @ v) if q.shape[1] else v

        r = perp(base[:, cols].reshape(-1))
        sets = []
        for a in (first, second):
            t = self._exact_templates(a, range(self.bank.size), cols) if self.bank.size <= top else None
            if t is None:
                scores = []
                full = np.zeros_like(base)
                full[:, cols] = r.reshape(self.params.n_fft, len(cols))
                inner, energy = self.bank.matched(full, [int(bin_of(a.sc, self.dims.n_subcarriers))], a.sym)
                hyps = np.argsort(-np.abs(inner[:, 0]) ** 2 / energy)[:top]
                t = self._exact_templates(a, hyps, cols)
            else:
                hyps = np.arange(self.bank.size)
            sets.append((np.asarray(hyps), np.array([perp(v) for v in t])))
        (h1, t1), (h2, t2) = sets
        g1 = np.sum(np.abs(t1) ** 2, axis=1)
        g2 = np.sum(np.abs(t2) ** 2, axis=1)
        cross = t1.conj() @ t2.T
        b1 = t1.conj() @ r
        b2 = t2.conj() @ r
        det = g1[:, None] * g2[None, :] - np.abs(cross) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            num = (g2[None, :] * np.abs(b1[:, None]) ** 2 + g1[:, None] * np.abs(b2[None, :]) ** 2
                   - 2 * np.real(np.conj(b1[:, None]) * cross * b2[None, :]))
            fit = np.where(det > 1e-9 * g1[:, None] * g2[None, :], num / det, -np.inf)
        i, j = np.unravel_index(np.argmax(fit), fit.shape)
        if not np.isfinite(fit[i, j]):
            return first, second
        return (Atom(first.sc, first.sym, int(h1[i]), 0j), Atom(second.sc, second.sym, int(h2[j]), 0j))

    def _cluster_repair(self, atoms, resid, n_atoms, limit=None, spread=8, max_size=6,
                        rounds=4, sweeps=8):
        """Re-solve local clusters of atoms with exact joint fits.

        Several strongly shifted pulses close together in one symbol have
        nearly collinear templates; they can settle on a wrong set of
        hypotheses whose gains compensate each other, out of reach of
        single-atom moves. Around the symbol holding the most unexplained
        energy, each clustered atom is re-chosen in turn against the
        residual with the other cluster members projected out."""
        n_sc, n = self.dims.n_subcarriers, self.params.n_fft
        band = bin_of(np.arange(n_sc), n_sc) % n
        tried = np.zeros((n_sc, self.dims.n_symbols), dtype=bool)
        for _ in range(rounds):
            if not atoms or self._band_excess(resid) < 0.1 * self._weakest:
                break
            power = np.where(tried, 0.0, np.abs(resid[band]) ** 2)
            peak, worst = np.unravel_index(np.argmax(power), power.shape)
            tried[max(peak - spread, 0):peak + spread + 1, worst] = True
            near = sorted((abs(a.sc - peak), i) for i, a in enumerate(atoms)
                          if a.sym in (worst, worst + 1) and abs(a.sc - peak) <= spread)
            members = [i for _, i in near[:max_size]]
            cluster = [atoms[i] for i in members]
            if len(atoms) < n_atoms:
                # room for one more pulse: let the sweeps place it
                cluster.append(Atom(int(peak), int(worst), 0, 0j))
            if not cluster:
                continue
            span = []
            for sym in (worst, worst + 1):
                ok = ((self.cand_sym[:limit] == sym) & (np.abs(self.cand_sc[:limit] - peak) <= spread)
                      & (self.cand_sym[:limit] * n_sc + self.cand_sc[:limit] < self._region))
                if np.any(ok):
                    span.append((sym, self.cand_sc[:limit][ok]))
            rest = [a for i, a in enumerate(atoms) if i not in members]
            base = resid.copy()
            for a in cluster:
                self._apply(base, a, +1)
            cols = [c for c in (worst - 1, worst, worst + 1) if 0 <= c < self.dims.n_symbols]
            for _ in range(sweeps):
                before = [(a.sc, a.sym, a.h) for a in cluster]
                for i in range(len(cluster)):
                    cluster[i] = self._projected_best(cluster[i], cluster[:i] + cluster[i + 1:],
                                                      base, cols, span)
                # pulses whose leakage cancels only move together
                for i in range(len(cluster)):
                    for j in range(i + 1, len(cluster)):
                        rest_ij = [a for t, a in enumerate(cluster) if t not in (i, j)]
                        cluster[i], cluster[j] = self._pair_move(cluster[i], cluster[j], rest_ij,
                                                                 base, cols)
                if [(a.sc, a.sym, a.h) for a in cluster] == before:
                    break
            cluster, trial_resid = self._cluster_fit(cluster, base, cols)
            if self._energy(trial_resid) < self._energy(resid) - 0.25 * self._weakest:
                atoms = self._prune(rest + cluster, trial_resid)
                resid[:] = trial_resid
                tried[:] = False
        return atoms

    def _fit_region(self, y, n_atoms, limit):
        atoms, resid = self.pursue(y, n_atoms, limit)
        live = self._prune(self.refine(atoms, resid), resid)
        live = self._prune(self._joint_sweeps(live, resid), resid)
        live = self._prune(self._eliminate(live, resid), resid)
        live = self._trim(self._split_pass(live, resid), resid, n_atoms)
        # weak pulses can lose the greedy race to cancellation leftovers:
        # re-seed dropped atoms globally and re-fit
        for _ in range(self.max_reseeds):
            missing = n_atoms - len(live)
            if missing == 0:
                break
            extra, trial_resid = self.pursue(resid, missing, limit)
            trial = self.refine(live + extra, trial_resid)
            trial = self._prune(self._joint_sweeps(trial, trial_resid), trial_resid)
            trial = self._prune(self._eliminate(trial, trial_resid), trial_resid)
            trial = self._trim(self._split_pass(trial, trial_resid), trial_resid, n_atoms)
            gained = self._energy(resid) - self._energy(trial_resid)
            if len(trial) < len(live) or (len(trial) == len(live) and gained < 0.25 * self._weakest):
                break
            live, resid = trial, trial_resid
        live = self._swap_pass(live, resid, n_atoms, limit)
        return self._cluster_repair(live, resid, n_atoms, limit), resid

    def receive(self, received) -> FrameDecision:
        cfg = self.cfg
        if isinstance(received, FrameWaveform):
            y = demodulate(received, self.params, self.dims.n_symbols)
        else:
            y = np.asarray(received, dtype=complex)
        if cfg.r_extra:
            return self._receive_repeated(y)

        decision = FrameDecision()
        found = self._structure(*self._fit_atoms(y), decision)
        if found is None:
            return decision
        entries, layout, atoms = found
        # cancel nothing but what the structure says is there
        resid = y.copy()
        for a in atoms:
            self._apply(resid, a, -1)
        perm = self._decide_permutation(resid, atoms, layout)
        tsfs, qam = self._decide_stops(resid, atoms, entries, decision)
        # tied stops were ordered by payload at the transmitter
        order = sorted(range(len(entries)),
                       key=lambda r: (entries[r][0], join_extra(tsfs[r], qam[r], cfg)))
        tsfs = [tsfs[r] for r in order]
        qam = [qam[r] for r in order]
        return self._finish(decision, [e[0] for e in entries], perm, tsfs, qam)

    def _finish(self, decision, slots, perm, tsfs, qam):
        alloc = allocation_from_parts(self.cfg, slots, perm, tsfs, qam)
        try:
            msgs, extras = decode_frame(alloc)
        except MalformedFrameError as exc:
            decision.ok = False
            decision.reason = str(exc)
            return decision
        decision.messages, decision.extras, decision.allocation = msgs, extras, alloc
        return decision

    def _structure(self, live, resid, decision):
        """Turn fitted atoms into counter-ordered stop entries and the frame
        layout; returns ``None`` (and marks ``decision``) when inconsistent."""
        cfg = self.cfg
        by_re = {}
        for a in live:
            by_re.setdefault(a.re, []).append(a)
        atoms = [a for g in by_re.values() for a in g]
        stops = self._stop_res(atoms)
        stop_atoms = [by_re[re] for _, re in stops]
        slots = [s for s, _ in stops]
        mult = [len(g) for g in stop_atoms]
        # too few stop bits: first look for a collision hidden under one atom
        # (two different pulses fitted as one), then for identical colliding
        # stop bits, which add up on one atom and are resolved by amplitude
        while sum(mult) < cfg.n_messages and stops:
            best = None
            for r, group in enumerate(stop_atoms):
                if len(group) != 1:
                    continue
                pair, local, gain = self._split(resid, group[0])
                if all(self._is_active(a) for a in pair) and (best is None or gain > best[3]):
                    best = (r, pair, local, gain)
            if best is None:
                break
            r, pair, resid, _ = best
            stop_atoms[r] = pair
            mult[r] = 2
            by_re[pair[0].re] = pair
        while sum(mult) < cfg.n_messages and stops:
            best, best_gain = None, -np.inf
            for r, group in enumerate(stop_atoms):
                if len(group) != 1:
                    continue
                c = group[0].c / self.gain
                cur, nxt = mult[r], mult[r] + 1
                err_cur = np.min(np.abs(constellation(cfg.qam_bits) * cur - c))
                err_nxt = np.min(np.abs(constellation(cfg.qam_bits) * nxt - c))
                if err_cur - err_nxt > best_gain:
                    best, best_gain = r, err_cur - err_nxt
            if best is None:
                break
            mult[best] += 1
        atoms = [a for g in by_re.values() for a in g]
        decision.atoms = atoms
        if sum(mult) != cfg.n_messages:
            decision.ok = False
            decision.reason = f"found {sum(mult)} stop bits, expected {cfg.n_messages}"
            return None

        # one entry per stop bit (counter order)
        entries = []
        for slot, group, mu in zip(slots, stop_atoms, mult):
            if len(group) > 1:
                for a in group:
                    entries.append((slot, a.re, a, 1))
            else:
                entries.extend((slot, group[0].re, group[0], mu) for _ in range(mu))
        entries.sort(key=lambda e: e[0])
        try:
            layout = layout_frame(cfg, self.dims, [e[0] for e in entries])
        except StartStopError as exc:  # the detection is inconsistent with any frame
            decision.ok = False
            decision.reason = f"layout failed: {exc}"
            return None
        return entries, layout, atoms

    # -- frames with repetition ------------------------------------------------

    def _receive_repeated(self, y):
        """Stop bits from the counter region, then a structured fit of the
        known permutation and copy positions, alternated until the stop
        slots agree with the cancelled structure."""
        decision = FrameDecision()
        fit = self._repeated_rounds(y, decision, thorough=False)
        if fit is None or self._band_excess(fit[4]) >= 0.5 * self._weakest:
            # the quick first pass can mistake leaking copies for stop bits
            retry_decision = FrameDecision()
            retry = self._repeated_rounds(y, retry_decision, thorough=True)
            if retry is not None and (fit is None or self._energy(retry[4]) < self._energy(fit[4])):
                fit, decision = retry, retry_decision
        if fit is None:
            return decision
        entries, layout, groups, perm_atoms, resid = fit
        cfg = self.cfg
        atoms = [Atom(p[0], p[1], g[2], g[3]) for g in groups for p in g[0]] + perm_atoms
        decision.atoms = atoms
        perm = self._decide_permutation(resid, atoms, layout)
        tsfs = [tuple(int(v) for v in self.bank.hyps[g[2]]) for g in groups]
        qam = [int(slice_symbols(g[3] / self.gain, cfg.qam_bits)) for g in groups]
        return self._finish(decision, [e[0] for e in entries], perm, tsfs, qam)

    def _repeated_rounds(self, y, decision, thorough):
        cfg = self.cfg
        m = cfg.n_messages
        skips = self.dims.skip_size if cfg.tsfs_enabled else 0
        limit = min(self.cand_sc.size, (1 << cfg.n_bits) + m * skips)
        other = np.zeros_like(y)
        slots = None
        for rnd in range(self.max_reseeds):
            if rnd > 0:
                live, resid = self._fit_atoms(y - other, m, limit)
            elif thorough:
                live, resid = self._fit_atoms(y)
            else:
                # the copies leak into the last counter symbols: a quick
                # fit of the whole frame explains them well enough to find
                # the stop bits and hence the layout
                atoms, resid = self.pursue(y, cfg.n_active)
                live = self._prune(self.refine(atoms, resid), resid)
            found = self._structure(live, resid, decision)
            if found is None:
                return None
            entries, layout, _ = found
            if slots == [e[0] for e in entries]:
                break
            slots = [e[0] for e in entries]
            groups, perm_atoms, resid = self._fit_repeated(y, entries, layout)
            other = np.zeros_like(y)
            for g, (_, re, _, _) in zip(groups, entries):
                for p in g[0]:
                    if p != re:
                        self._apply(other, Atom(p[0], p[1], g[2], g[3]), +1)
            for a in perm_atoms:
                self._apply(other, a, +1)
        return self._repeat_swaps(y, live, (entries, layout, groups, perm_atoms, resid), limit)

    def _repeat_swaps(self, y, live, fit, limit):
        """A wrong stop RE shifts the whole copy layout, and the rounds can
        agree on it. While the structured fit leaves energy unexplained,
        try trading each stop atom for the exact best new atom of the
        counter region and keep the trade that fits the frame best."""
        live = list(live)
        for _ in range(self.cfg.n_messages):
            resid = fit[4]
            if self._band_excess(resid) < 0.5 * self._weakest:
                break
            cand, gain = self._global_best(resid, limit)
            if cand is None or gain < 0.25 * self._weakest:
                break
            best, best_live = None, None
            for i in range(len(live)):
                trial = live[:i] + live[i + 1:] + [cand]
                found = self._structure(trial, resid, FrameDecision())
                if found is None:
                    continue
                entries, layout, _ = found
                groups, perm, trial_resid = self._fit_repeated(y, entries, layout)
                if best is None or self._energy(trial_resid) < self._energy(best[4]):
                    best, best_live = (entries, layout, groups, perm, trial_resid), trial
            if best is None or self._energy(best[4]) >= self._energy(resid) - 0.25 * self._weakest:
                break
            fit, live = best, best_live
        return fit

    def _fit_repeated(self, y, entries, layout, tol=1e-10):
        """Cyclic fit of every stop bit together with its copies (one shared
        hypothesis and gain per stop bit) and of every permutation RE."""
        counts = {}
        for _, re, _, _ in entries:
            counts[re] = counts.get(re, 0) + 1
        groups = []
        resid = y.copy()
        for r, (_, re, atom, mu) in enumerate(entries):
            copies = layout.rep_res(r)
            # a shared original RE carries two pulses: decide from the copies
            fuse = list(copies) if counts[re] > 1 else [re, *copies]
            # copies start from the fit of their original stop bit
            groups.append([[re, *copies], self._group_template(fuse), atom.h, atom.c / mu])
            for p in groups[-1][0]:
                self._apply(resid, Atom(p[0], p[1], atom.h, atom.c / mu), -1)
        perm = [Atom(sc, sym, 0, 0j) for row in layout.perm_res() for sc, sym in row]
        for _ in range(self.max_sweeps):
            changed, drift = False, 0.0
            for g in groups:
                res, template, h, c = g
                for p in res:
                    self._apply(resid, Atom(p[0], p[1], h, c), +1)
                h_new, c_new = self._group_fit(resid, template)
                changed |= h_new != h
                drift = max(drift, abs(c_new - c))
                g[2], g[3] = h_new, c_new
                for p in res:
                    self._apply(resid, Atom(p[0], p[1], h_new, c_new), -1)
            for j, a in enumerate(perm):
                self._apply(resid, a, +1)
                inner, energy, _ = self.bank.correlate(
                    resid, [int(bin_of(a.sc, self.dims.n_subcarriers))], [a.sym])
                new = Atom(a.sc, a.sym, 0, complex(inner[0, 0] / energy[0, 0]))
                drift = max(drift, abs(new.c - a.c))
                perm[j] = new
                self._apply(resid, new, -1)
            if not changed and drift <= tol * self.gain:
                break
        return groups, perm, resid

    def _group_template(self, res):
        """Exact template of every hypothesis for pulses at all REs in
        ``res``, over the bins they span plus a margin; returns
        ``(index into the bin grid, templates (H, cells), energies)``."""
        pad = 4 * self.bank.width
        n = self.params.n_fft
        ks = np.array([int(bin_of(sc, self.dims.n_subcarriers)) for sc, _ in res])
        syms = [sym for _, sym in res]
        k0, k1 = ks.min() - pad, ks.max() + pad
        s0 = max(min(syms) - 1, 0)
        # every pulse sees the box at offsets k0-k .. k1-k: one table serves all
        t_prev, t_own = self.bank.wide(np.arange(k0 - ks.max(), k1 - ks.min() + 1))
        span = k1 - k0 + 1
        box = np.zeros((self.bank.size, span, max(syms) + 1 - s0), dtype=complex)
        ph_prev, ph_own = self.bank.phases(ks)
        for i, (k, sym) in enumerate(zip(ks, syms)):
            cols = slice(ks.max() - k, ks.max() - k + span)
            box[:, :, sym - s0] += t_own[:, cols] * ph_own[i][:, None]
            if sym > 0:
                box[:, :, sym - 1 - s0] += t_prev[:, cols] * ph_prev[i][:, None]
        where = np.ix_(np.arange(k0, k1 + 1) % n, range(s0, s0 + box.shape[2]))
        box = box.reshape(self.bank.size, -1)
        return where, box, np.sum(np.abs(box) ** 2, axis=1)

    def _group_fit(self, resid, template):
        """Best common hypothesis and gain for one group template."""
        where, box, energy = template
        inner = box.conj() @ resid[where].reshape(-1)
        h = int(np.argmax(np.abs(inner) ** 2 / energy))
        return h, complex(inner[h] / energy[h])

    def _restore(self, resid, atoms, res):
        local = resid.copy()
        wanted = set(map(tuple, res))
        for a in atoms:
            if a.re in wanted:
                self._apply(local, a, +1)
        return local

    def _decide_permutation(self, resid, atoms, layout):
        m = self.cfg.n_messages
        res = [re for row in layout.perm_res() for re in row]
        local = self._restore(resid, atoms, res)
        sc = np.array([r[0] for r in res])
        sym = np.array([r[1] for r in res])
        vals = local[bin_of(sc, self.dims.n_subcarriers) % self.params.n_fft, sym]
        weight = np.real(vals).reshape(m, m) / self.gain
        rows, cols = linear_sum_assignment(-weight)
        return [int(c) for _, c in sorted(zip(rows, cols))]

    def _decide_stops(self, resid, atoms, entries, decision):
        """Per stop bit decision for frames without repetition."""
        cfg = self.cfg
        counts = {}
        for slot, re, _, _ in entries:
            counts[re] = counts.get(re, 0) + 1
        tsfs, qam = [], []
        for slot, re, atom, mu in entries:
            if counts[re] > 1:
                # collided stop: take the atom-level fit
                h = atom.h
                c = atom.c / (self.gain * mu)
                if mu > 1 and len({a.h for a in atoms if a.re == re}) == 1:
                    decision.ambiguous = True
            else:
                inner, energy, _ = self.bank.correlate(
                    self._restore(resid, atoms, [re]),
                    [int(bin_of(re[0], self.dims.n_subcarriers))], [re[1]])
                h, _, c, _, _ = decide(inner[0], energy[0], self.gain, cfg.qam_bits,
                                       self.threshold)
                h, c = int(h), c / self.gain
            n_t, n_f = self.bank.hyps[h]
            tsfs.append((int(n_t), int(n_f)))
            qam.append(int(slice_symbols(c, cfg.qam_bits)))
        return tsfs, qam


def receive_frame(received, cfg: FrameConfig, dims: GridDims, params: OfdmParams | None = None,
                  steps: ShiftSteps | None = None, **kw) -> FrameDecision:
    return FrameReceiver(cfg, dims, params, steps, **kw).receive(received)
