"""Spatial operators of the staggered scheme.

Sign conventions used throughout:

- direction-i faces are ordered along axis i; for an interior face the cell
  behind (lower axis-i index) plays the role of K, so the face normal out of
  K is +e_i and ``u_{K,sigma} = +u_sigma``.
- primal mass fluxes are stored as the flux in the +e_i direction,
  ``phi_sigma = |sigma| rho_sigma u_sigma``; the flux outward a cell is
  ``+phi`` through its upper face and ``-phi`` through its lower face.
- dual mass fluxes through the faces of a velocity control volume are stored
  the same way: directed along +e_j on the grid they live on (primal cells
  for the parallel case, the shared (i, j) dual-dual grid otherwise).

Every operator exists both matrix-free (``*_apply`` / plain functions) and as
an assembled sparse matrix over the interior-face unknowns; equality of the
two paths is part of the acceptance suite.
"""

import numpy as np
import scipy.sparse as sp

from .fields import CellScalarField, DualGridField, VelocityField, _pad_zero
from .mesh import MacMesh

__all__ = [
    "OperatorError",
    "ViscosityError",
    "MassFluxSet",
    "ViscosityTensorField",
    "FaceDofMap",
    "divergence",
    "mass_divergence",
    "pressure_gradient",
    "velocity_gradient",
    "strain_tensor",
    "viscosity_tensor",
    "diffusion_apply",
    "strain_product",
    "gradient_inner",
    "gradient_transpose_inner",
    "primal_fluxes",
    "dual_fluxes",
    "dual_cell_density",
    "convection_apply",
    "trilinear_form",
    "trilinear_form_reconstructed",
    "divergence_matrix",
    "divergence_constraint_matrix",
    "pressure_gradient_matrix",
    "diffusion_matrix",
    "convection_matrix",
    "transport_matrix",
    "dump_matrix_coo",
]


class OperatorError(ValueError):
    """Operator applied to inconsistent data."""


class ViscosityError(ValueError):
    """Viscosity law produced non-positive or non-finite values."""


def _axis_view(arr, axis, dim):
    sh = [1] * dim
    sh[axis] = arr.size
    return arr.reshape(sh)


# -- gradient kernels (array level) ----------------------------------------------

def _grad_parallel(mesh, us, i):
    """d(u_i)/dx_i on primal cells."""
    return np.diff(us, axis=i) / _axis_view(mesh.widths[i], i, mesh.dim)


def _grad_transverse(mesh, us, i, j):
    """d(u_i)/dx_j on the (i, j) dual-dual grid, zero ghost beyond the
    boundary (homogeneous Dirichlet)."""
    padded = _pad_zero(us, j)
    return np.diff(padded, axis=j) / _axis_view(mesh.dual_widths[j], j, mesh.dim)


def _grad(mesh, us, i, j):
    return _grad_parallel(mesh, us, i) if i == j else _grad_transverse(mesh, us, i, j)


def velocity_gradient(mesh: MacMesh, u_i, i):
    """All d partial derivatives of one velocity component, each piecewise
    constant on the matching (i, j) dual-dual grid."""
    us = np.asarray(u_i, dtype=float).reshape(mesh.faces_shape(i))
    return [DualGridField(mesh, i, j, _grad(mesh, us, i, j).ravel())
            for j in range(mesh.dim)]


def strain_tensor(u: VelocityField):
    """Symmetrised gradient; entries (i, j) and (j, i) share one array on the
    shared dual-dual grid."""
    mesh = u.mesh
    out = {}
    for i in range(mesh.dim):
        out[(i, i)] = DualGridField(
            mesh, i, i, _grad_parallel(mesh, u.shaped(i), i).ravel())
    for i in range(mesh.dim):
        for j in range(i + 1, mesh.dim):
            sym = 0.5 * (_grad_transverse(mesh, u.shaped(i), i, j)
                         + _grad_transverse(mesh, u.shaped(j), j, i))
            fld = DualGridField(mesh, i, j, sym.ravel())
            out[(i, j)] = fld
            out[(j, i)] = fld
    return out


# -- divergence and pressure gradient ---------------------------------------------

def divergence(u: VelocityField) -> CellScalarField:
    """(div u)_K = (1/|K|) sum over the faces of K of |sigma| u_{K,sigma}."""
    mesh = u.mesh
    acc = np.zeros(mesh.cells_shape)
    for i in range(mesh.dim):
        acc += _grad_parallel(mesh, u.shaped(i), i)
    return CellScalarField(mesh, acc.ravel())


def pressure_gradient(p: CellScalarField) -> VelocityField:
    """(grad p)_sigma = (|sigma| / |D_sigma|)(p_L - p_K) on interior faces,
    zero on exterior faces."""
    mesh = p.mesh
    ps = p.shaped
    comps = []
    for i in range(mesh.dim):
        out = np.zeros(mesh.faces_shape(i))
        inner = [slice(None)] * mesh.dim
        inner[i] = slice(1, mesh.n[i])
        dw = _axis_view(mesh.dual_widths[i][1:-1], i, mesh.dim)
        out[tuple(inner)] = np.diff(ps, axis=i) / dw
        comps.append(out.ravel())
    return VelocityField(mesh, comps)


# -- viscosity --------------------------------------------------------------------

class ViscosityTensorField:
    """mu on primal cells plus one value per dual-dual cell of every pair,
    symmetric under pair transposition by construction."""

    def __init__(self, mesh, mu_cells, mu_transverse):
        self.mesh = mesh
        self.mu_cells = mu_cells            # shaped array
        self._transverse = mu_transverse    # {(i, j) with i < j: shaped array}

    def pair(self, i, j):
        """mu on the (i, j) dual-dual grid."""
        if i == j:
            return self.mu_cells
        return self._transverse[(min(i, j), max(i, j))]


def viscosity_tensor(rho: CellScalarField, mu_law) -> ViscosityTensorField:
    """Cellwise viscosity mu_K = mu(rho_K) and the measure-weighted averages
    over the cells meeting each transverse dual-dual cell (the two-cell
    boundary rule is the degenerate case of the four-cell interior one)."""
    mesh = rho.mesh
    mu_cells = np.asarray(mu_law(rho.values), dtype=float)
    if mu_cells.shape != rho.values.shape:
        mu_cells = np.broadcast_to(mu_cells, rho.values.shape).copy()
    if not np.all(np.isfinite(mu_cells)) or np.any(mu_cells <= 0.0):
        raise ViscosityError("viscosity law produced non-positive or non-finite values")
    mu_cells = mu_cells.reshape(mesh.cells_shape)
    weighted = mesh.cell_volumes * mu_cells
    transverse = {}
    for i in range(mesh.dim):
        for j in range(i + 1, mesh.dim):
            num = _corner_sum(weighted, i, j)
            den = _corner_sum(mesh.cell_volumes, i, j)
            transverse[(i, j)] = num / den
    return ViscosityTensorField(mesh, mu_cells, transverse)


def _corner_sum(arr, i, j):
    """Sum of the up-to-four entries adjacent to each (axis-i, axis-j) corner."""
    p = _pad_zero(_pad_zero(arr, i), j)
    lo_i = [slice(None)] * arr.ndim
    hi_i = [slice(None)] * arr.ndim
    lo_i[i] = slice(0, arr.shape[i] + 1)
    hi_i[i] = slice(1, arr.shape[i] + 2)
    step = p[tuple(lo_i)] + p[tuple(hi_i)]
    lo_j = [slice(None)] * arr.ndim
    hi_j = [slice(None)] * arr.ndim
    lo_j[j] = slice(0, arr.shape[j] + 1)
    hi_j[j] = slice(1, arr.shape[j] + 2)
    return step[tuple(lo_j)] + step[tuple(hi_j)]


# -- diffusion --------------------------------------------------------------------

def _viscous_flux(mesh, mu_t, u, i, j):
    """+e_j-directed viscous flux |sigma~| (mu/2)(d_j u_i + d_i u_j) on the
    (i, j) grid."""
    us = u.shaped(i)
    if i == j:
        cross = mesh.cell_volumes / _axis_view(mesh.widths[i], i, mesh.dim)
        return cross * mu_t.pair(i, i) * _grad_parallel(mesh, us, i)
    sym = _grad_transverse(mesh, us, i, j) + _grad_transverse(mesh, u.shaped(j), j, i)
    measure = mesh.pair_volumes(i, j) / _axis_view(mesh.dual_widths[j], j, mesh.dim)
    return measure * (0.5 * mu_t.pair(i, j)) * sym


def diffusion_apply(mu_t: ViscosityTensorField, u: VelocityField) -> VelocityField:
    """div_E(mu D(u)): per interior face, the dual-face viscous fluxes summed
    with outward signs and divided by |D_sigma|."""
    mesh = u.mesh
    comps = []
    for i in range(mesh.dim):
        acc = np.zeros(mesh.faces_shape(i))
        for j in range(mesh.dim):
            flux = _viscous_flux(mesh, mu_t, u, i, j)
            if j == i:
                inner = [slice(None)] * mesh.dim
                inner[i] = slice(1, mesh.n[i])
                acc[tuple(inner)] += np.diff(flux, axis=i)
            else:
                acc += np.diff(flux, axis=j)
        acc /= mesh.dual_volumes(i)
        acc[~mesh.interior_mask(i)] = 0.0
        comps.append(acc.ravel())
    return VelocityField(mesh, comps)


def strain_product(mu_t: ViscosityTensorField, u: VelocityField,
                   v: VelocityField | None = None) -> float:
    """Integral of mu D(u) : D(v) over the domain (v defaults to u)."""
    v = u if v is None else v
    mesh = u.mesh
    du, dv = strain_tensor(u), strain_tensor(v)
    total = 0.0
    for i in range(mesh.dim):
        for j in range(mesh.dim):
            vols = mesh.pair_volumes(i, j)
            mu = mu_t.pair(i, j)
            total += float(np.sum(vols * mu * du[(i, j)].shaped * dv[(i, j)].shaped))
    return total


def gradient_inner(u: VelocityField, v: VelocityField) -> float:
    """Integral of grad u : grad v (equals the discrete H1 inner product)."""
    mesh = u.mesh
    total = 0.0
    for i in range(mesh.dim):
        us, vs = u.shaped(i), v.shaped(i)
        for j in range(mesh.dim):
            total += float(np.sum(mesh.pair_volumes(i, j)
                                  * _grad(mesh, us, i, j) * _grad(mesh, vs, i, j)))
    return total


def gradient_transpose_inner(u: VelocityField, v: VelocityField) -> float:
    """Integral of grad u : (grad v)^T, pairing d_j u_i with d_i v_j on the
    shared dual-dual cells."""
    mesh = u.mesh
    total = 0.0
    for i in range(mesh.dim):
        us = u.shaped(i)
        for j in range(mesh.dim):
            gij = _grad(mesh, us, i, j)
            gji = _grad(mesh, v.shaped(j), j, i)
            total += float(np.sum(mesh.pair_volumes(i, j) * gij * gji))
    return total


# -- mass fluxes ------------------------------------------------------------------

class MassFluxSet:
    """Primal and dual mass fluxes of a (density, velocity) pair.

    ``phi[i]``: +e_i-directed flux per direction-i face.
    ``rho_face[i]``: upwind face densities.
    ``parallel_phi[i]``: dual flux through the in-cell plane, on primal cells.
    ``transverse_phi[(i, j)]``: +e_j-directed dual flux for component i.
    ``rho_tilde`` / ``u_hat``: the convex pair with
    ``dual flux = |sigma~| rho_tilde u_hat`` on the same grids.
    """

    def __init__(self, mesh, rho, u):
        self.mesh = mesh
        self.rho = rho
        self.u = u
        self.phi = []
        self.rho_face = []
        self.parallel_phi = {}
        self.transverse_phi = {}
        self.rho_tilde = {}
        self.u_hat = {}


def primal_fluxes(rho: CellScalarField, u: VelocityField) -> MassFluxSet:
    """Upwind face densities and primal mass fluxes; the donor at zero
    velocity is the cell behind, matching the non-strict upwind inequality."""
    mesh = rho.mesh
    fluxes = MassFluxSet(mesh, rho, u)
    rs = rho.shaped
    for i in range(mesh.dim):
        us = u.shaped(i)
        rho_f = np.empty(mesh.faces_shape(i))
        inner = [slice(None)] * mesh.dim
        inner[i] = slice(1, mesh.n[i])
        behind = [slice(None)] * mesh.dim
        ahead = [slice(None)] * mesh.dim
        behind[i] = slice(0, mesh.n[i] - 1)
        ahead[i] = slice(1, mesh.n[i])
        rho_f[tuple(inner)] = np.where(us[tuple(inner)] >= 0.0,
                                       rs[tuple(behind)], rs[tuple(ahead)])
        first = [slice(None)] * mesh.dim
        last = [slice(None)] * mesh.dim
        first[i], last[i] = 0, mesh.n[i]
        cfirst = [slice(None)] * mesh.dim
        clast = [slice(None)] * mesh.dim
        cfirst[i], clast[i] = 0, mesh.n[i] - 1
        rho_f[tuple(first)] = rs[tuple(cfirst)]
        rho_f[tuple(last)] = rs[tuple(clast)]
        fluxes.rho_face.append(rho_f)
        fluxes.phi.append(mesh.face_measures(i) * rho_f * us)
    return fluxes


def dual_fluxes(fluxes: MassFluxSet) -> MassFluxSet:
    """Fill the dual fluxes and the (rho_tilde, u_hat) pairs from the primal
    fluxes; antisymmetry across every interior dual face is structural."""
    mesh = fluxes.mesh
    for i in range(mesh.dim):
        us = fluxes.u.shaped(i)
        phi = fluxes.phi[i]
        rho_f = fluxes.rho_face[i]
        lo = [slice(None)] * mesh.dim
        hi = [slice(None)] * mesh.dim
        lo[i] = slice(0, mesh.n[i])
        hi[i] = slice(1, mesh.n[i] + 1)
        fluxes.parallel_phi[i] = 0.5 * (phi[tuple(lo)] + phi[tuple(hi)])
        rsum = rho_f[tuple(lo)] + rho_f[tuple(hi)]
        fluxes.rho_tilde[(i, i)] = 0.5 * rsum
        mom = rho_f[tuple(lo)] * us[tuple(lo)] + rho_f[tuple(hi)] * us[tuple(hi)]
        with np.errstate(invalid="ignore", divide="ignore"):
            fluxes.u_hat[(i, i)] = np.where(rsum != 0.0, mom / rsum, 0.0)
        for j in range(mesh.dim):
            if j == i:
                continue
            phi_j = _pad_zero(fluxes.phi[j], i)
            li = [slice(None)] * mesh.dim
            hi2 = [slice(None)] * mesh.dim
            li[i] = slice(0, mesh.n[i] + 1)
            hi2[i] = slice(1, mesh.n[i] + 2)
            fluxes.transverse_phi[(i, j)] = 0.5 * (phi_j[tuple(li)] + phi_j[tuple(hi2)])
            # measure-weighted density / flux-weighted velocity across axis i
            wi = mesh.widths[i]
            wlo = _axis_view(np.concatenate(([0.0], wi)), i, mesh.dim)
            whi = _axis_view(np.concatenate((wi, [0.0])), i, mesh.dim)
            rj = _pad_zero(fluxes.rho_face[j], i)
            uj = _pad_zero(fluxes.u.shaped(j), i)
            num_r = wlo * rj[tuple(li)] + whi * rj[tuple(hi2)]
            den_r = wlo + whi
            rho_t = num_r / den_r
            num_u = (wlo * rj[tuple(li)] * uj[tuple(li)]
                     + whi * rj[tuple(hi2)] * uj[tuple(hi2)])
            with np.errstate(invalid="ignore", divide="ignore"):
                u_hat = np.where(num_r != 0.0, num_u / num_r, 0.0)
            fluxes.rho_tilde[(i, j)] = rho_t
            fluxes.u_hat[(i, j)] = u_hat
    return fluxes


def mass_fluxes(rho: CellScalarField, u: VelocityField) -> MassFluxSet:
    return dual_fluxes(primal_fluxes(rho, u))


def mass_divergence(fluxes: MassFluxSet) -> CellScalarField:
    """(1/|K|) sum of the primal fluxes outward each cell."""
    mesh = fluxes.mesh
    acc = np.zeros(mesh.cells_shape)
    for i in range(mesh.dim):
        acc += np.diff(fluxes.phi[i], axis=i)
    return CellScalarField(mesh, (acc / mesh.cell_volumes).ravel())


def dual_flux_divergence(fluxes: MassFluxSet, i):
    """(1/|D_sigma|) sum of the dual fluxes outward each direction-i control
    volume (zero entries on exterior faces)."""
    mesh = fluxes.mesh
    acc = np.zeros(mesh.faces_shape(i))
    inner = [slice(None)] * mesh.dim
    inner[i] = slice(1, mesh.n[i])
    acc[tuple(inner)] += np.diff(fluxes.parallel_phi[i], axis=i)
    for j in range(mesh.dim):
        if j == i:
            continue
        acc += np.diff(fluxes.transverse_phi[(i, j)], axis=j)
    acc /= mesh.dual_volumes(i)
    acc[~mesh.interior_mask(i)] = 0.0
    return acc


def dual_cell_density(rho: CellScalarField):
    """rho_{D_sigma}: half-cell weighted average on interior faces, adjacent
    cell value on exterior faces.  One array per direction."""
    mesh = rho.mesh
    rs = rho.shaped
    out = []
    for i in range(mesh.dim):
        arr = np.empty(mesh.faces_shape(i))
        w = mesh.widths[i]
        lo_w = _axis_view(0.5 * w[:-1], i, mesh.dim)
        hi_w = _axis_view(0.5 * w[1:], i, mesh.dim)
        dw = _axis_view(mesh.dual_widths[i][1:-1], i, mesh.dim)
        inner = [slice(None)] * mesh.dim
        inner[i] = slice(1, mesh.n[i])
        behind = [slice(None)] * mesh.dim
        ahead = [slice(None)] * mesh.dim
        behind[i] = slice(0, mesh.n[i] - 1)
        ahead[i] = slice(1, mesh.n[i])
        arr[tuple(inner)] = (lo_w * rs[tuple(behind)] + hi_w * rs[tuple(ahead)]) / dw
        first = [slice(None)] * mesh.dim
        last = [slice(None)] * mesh.dim
        first[i], last[i] = 0, mesh.n[i]
        cfirst = [slice(None)] * mesh.dim
        clast = [slice(None)] * mesh.dim
        cfirst[i], clast[i] = 0, mesh.n[i] - 1
        arr[tuple(first)] = rs[tuple(cfirst)]
        arr[tuple(last)] = rs[tuple(clast)]
        out.append(arr)
    return out


# -- convection -------------------------------------------------------------------

def _advected_values(mesh, vs, i, j, dual_phi, scheme):
    """Single-valued advected quantity on each dual face of the (i, j) grid:
    centered mean of the two straddling faces, or the donor by flux sign
    (lower face on ties)."""
    if i == j:
        lo = [slice(None)] * mesh.dim
        hi = [slice(None)] * mesh.dim
        lo[i] = slice(0, mesh.n[i])
        hi[i] = slice(1, mesh.n[i] + 1)
        vlo, vhi = vs[tuple(lo)], vs[tuple(hi)]
    else:
        padded = _pad_zero(vs, j)
        lo = [slice(None)] * mesh.dim
        hi = [slice(None)] * mesh.dim
        lo[j] = slice(0, mesh.n[j] + 1)
        hi[j] = slice(1, mesh.n[j] + 2)
        vlo, vhi = padded[tuple(lo)], padded[tuple(hi)]
    if scheme == "centered":
        return 0.5 * (vlo + vhi)
    if scheme == "upwind":
        return np.where(dual_phi >= 0.0, vlo, vhi)
    raise OperatorError(f"unknown advection scheme {scheme!r}")


def convection_apply(fluxes: MassFluxSet, v: VelocityField,
                     scheme="centered") -> VelocityField:
    """(C v)_sigma = (1/|D_sigma|) sum of dual fluxes times the advected
    value, outward signs; exterior dual fluxes vanish with the homogeneous
    boundary velocity."""
    mesh = fluxes.mesh
    comps = []
    for i in range(mesh.dim):
        vs = v.shaped(i)
        acc = np.zeros(mesh.faces_shape(i))
        pp = fluxes.parallel_phi[i]
        val = _advected_values(mesh, vs, i, i, pp, scheme)
        inner = [slice(None)] * mesh.dim
        inner[i] = slice(1, mesh.n[i])
        acc[tuple(inner)] += np.diff(pp * val, axis=i)
        for j in range(mesh.dim):
            if j == i:
                continue
            tp = fluxes.transverse_phi[(i, j)]
            val = _advected_values(mesh, vs, i, j, tp, scheme)
            acc += np.diff(tp * val, axis=j)
        acc /= mesh.dual_volumes(i)
        acc[~mesh.interior_mask(i)] = 0.0
        comps.append(acc.ravel())
    return VelocityField(mesh, comps)


def trilinear_form(fluxes: MassFluxSet, v: VelocityField, w: VelocityField,
                   scheme="centered") -> float:
    """b(rho u, v, w) evaluated through the convection operator."""
    cv = convection_apply(fluxes, v, scheme)
    total = 0.0
    for i in range(fluxes.mesh.dim):
        total += float(np.dot(fluxes.mesh.dual_volumes(i).ravel()
                              * cv.components[i], w.components[i]))
    return total


def trilinear_form_reconstructed(fluxes: MassFluxSet, v: VelocityField,
                                 w: VelocityField, scheme="centered") -> float:
    """b(rho u, v, w) through the dual-grid reconstruction: minus the sum over
    all dual-dual cells of |D| (rho u)~ v~ d_j w_i."""
    mesh = fluxes.mesh
    total = 0.0
    for i in range(mesh.dim):
        vs, ws = v.shaped(i), w.shaped(i)
        for j in range(mesh.dim):
            dual_phi = fluxes.parallel_phi[i] if j == i else fluxes.transverse_phi[(i, j)]
            if j == i:
                sigma = mesh.cell_volumes / _axis_view(mesh.widths[i], i, mesh.dim)
            else:
                sigma = mesh.pair_volumes(i, j) / _axis_view(mesh.dual_widths[j], j, mesh.dim)
            rho_u = dual_phi / sigma
            val = _advected_values(mesh, vs, i, j, dual_phi, scheme)
            grad_w = _grad(mesh, ws, i, j)
            total -= float(np.sum(mesh.pair_volumes(i, j) * rho_u * val * grad_w))
    return total


# -- interior-face unknown numbering ----------------------------------------------

class FaceDofMap:
    """Numbering of the interior faces of every direction as one unknown
    vector (direction blocks in order)."""

    def __init__(self, mesh: MacMesh):
        self.mesh = mesh
        self.dof = []
        self.interior = []
        self.offsets = []
        offset = 0
        for i in range(mesh.dim):
            mask = mesh.interior_mask(i).ravel()
            ids = np.flatnonzero(mask)
            dof = np.full(mesh.n_faces(i), -1, dtype=np.int64)
            dof[ids] = offset + np.arange(ids.size)
            self.dof.append(dof)
            self.interior.append(ids)
            self.offsets.append(offset)
            offset += ids.size
        self.n_dofs = offset

    def pack(self, components) -> np.ndarray:
        vec = np.empty(self.n_dofs)
        for i, comp in enumerate(components):
            vec[self.offsets[i]:self.offsets[i] + self.interior[i].size] = \
                np.asarray(comp).ravel()[self.interior[i]]
        return vec

    def unpack(self, vec):
        comps = []
        for i in range(self.mesh.dim):
            arr = np.zeros(self.mesh.n_faces(i))
            arr[self.interior[i]] = vec[self.offsets[i]:self.offsets[i]
                                        + self.interior[i].size]
            comps.append(arr)
        return comps


def _cell_ids(mesh):
    return np.arange(mesh.n_cells).reshape(mesh.cells_shape)


class _Coo:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals, keep=None):
        rows, cols, vals = np.broadcast_arrays(rows, cols, vals)
        mask = (rows >= 0) & (cols >= 0)
        if keep is not None:
            mask &= keep
        self.rows.append(rows[mask].ravel())
        self.cols.append(cols[mask].ravel())
        self.vals.append(np.asarray(vals, dtype=float)[mask].ravel())

    def build(self, shape):
        return sp.csr_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=shape)


# -- assembled matrices ------------------------------------------------------------

def divergence_matrix(mesh: MacMesh, dofs: FaceDofMap | None = None):
    """Sparse matrix mapping the interior-face vector to (div u)_K."""
    dofs = dofs or FaceDofMap(mesh)
    coo = _Coo()
    cells = _cell_ids(mesh)
    for i in range(mesh.dim):
        lo = [slice(None)] * mesh.dim
        hi = [slice(None)] * mesh.dim
        lo[i] = slice(0, mesh.n[i])
        hi[i] = slice(1, mesh.n[i] + 1)
        inv_w = 1.0 / _axis_view(mesh.widths[i], i, mesh.dim)
        coo.add(cells, dofs.dof[i].reshape(mesh.faces_shape(i))[tuple(lo)],
                -inv_w * np.ones(mesh.cells_shape))
        coo.add(cells, dofs.dof[i].reshape(mesh.faces_shape(i))[tuple(hi)],
                +inv_w * np.ones(mesh.cells_shape))
    return coo.build((mesh.n_cells, dofs.n_dofs))


def divergence_constraint_matrix(mesh: MacMesh, dofs: FaceDofMap | None = None):
    """Rows sum |sigma| u_{K,sigma} (not divided by |K|), as the saddle
    constraint block."""
    dofs = dofs or FaceDofMap(mesh)
    div = divergence_matrix(mesh, dofs)
    return sp.diags(mesh.cell_volumes.ravel()) @ div


def pressure_gradient_matrix(mesh: MacMesh, dofs: FaceDofMap | None = None):
    """Sparse matrix mapping cell values to the face gradient on interior
    faces."""
    dofs = dofs or FaceDofMap(mesh)
    coo = _Coo()
    cells = _cell_ids(mesh)
    for i in range(mesh.dim):
        dof = dofs.dof[i].reshape(mesh.faces_shape(i))
        inner = [slice(None)] * mesh.dim
        inner[i] = slice(1, mesh.n[i])
        rows = dof[tuple(inner)]
        behind = [slice(None)] * mesh.dim
        ahead = [slice(None)] * mesh.dim
        behind[i] = slice(0, mesh.n[i] - 1)
        ahead[i] = slice(1, mesh.n[i])
        inv_dw = 1.0 / _axis_view(mesh.dual_widths[i][1:-1], i, mesh.dim)
        ones = np.ones_like(rows, dtype=float)
        coo.add(rows, cells[tuple(behind)], -inv_dw * ones)
        coo.add(rows, cells[tuple(ahead)], +inv_dw * ones)
    return coo.build((dofs.n_dofs, mesh.n_cells))


def diffusion_matrix(mesh: MacMesh, mu_t: ViscosityTensorField,
                     dofs: FaceDofMap | None = None, weighted=False):
    """Matrix of u -> div_E(mu D(u)) on interior faces.  With
    ``weighted=True`` rows are scaled by |D_sigma| (the bilinear-form matrix,
    symmetric by construction of the face viscosities)."""
    dofs = dofs or FaceDofMap(mesh)
    coo = _Coo()
    for i in range(mesh.dim):
        dof_i = dofs.dof[i].reshape(mesh.faces_shape(i))
        # parallel fluxes: cell planes
        cross = mesh.cell_volumes / _axis_view(mesh.widths[i], i, mesh.dim)
        k = cross * mu_t.pair(i, i) / _axis_view(mesh.widths[i], i, mesh.dim)
        lo = [slice(None)] * mesh.dim
        hi = [slice(None)] * mesh.dim
        lo[i] = slice(0, mesh.n[i])
        hi[i] = slice(1, mesh.n[i] + 1)
        f_lo, f_hi = dof_i[tuple(lo)], dof_i[tuple(hi)]
        # flux = k (u_hi - u_lo); +flux to row lo, -flux to row hi
        for rows, sgn in ((f_lo, 1.0), (f_hi, -1.0)):
            coo.add(rows, f_hi, sgn * k)
            coo.add(rows, f_lo, -sgn * k)
        for j in range(mesh.dim):
            if j == i:
                continue
            dof_j = dofs.dof[j].reshape(mesh.faces_shape(j))
            vols = mesh.pair_volumes(i, j)
            measure = vols / _axis_view(mesh.dual_widths[j], j, mesh.dim)
            half_mu = 0.5 * mu_t.pair(i, j)
            coef = measure * half_mu
            # column ids of u_i below/above the dual face (ghost -> -1)
            ui_lo = _shift_ids(_pad_ids(dof_i, j), j, 0)
            ui_hi = _shift_ids(_pad_ids(dof_i, j), j, 1)
            inv_dwj = 1.0 / _axis_view(mesh.dual_widths[j], j, mesh.dim)
            # column ids of u_j behind/ahead across axis i
            uj_lo = _shift_ids(_pad_ids(dof_j, i), i, 0)
            uj_hi = _shift_ids(_pad_ids(dof_j, i), i, 1)
            inv_dwi = 1.0 / _axis_view(mesh.dual_widths[i], i, mesh.dim)
            rows_lo = _shift_ids(_pad_ids(dof_i, j), j, 0)   # row sigma(f, g-1)
            rows_hi = _shift_ids(_pad_ids(dof_i, j), j, 1)   # row sigma(f, g)
            for rows, sgn in ((rows_lo, 1.0), (rows_hi, -1.0)):
                coo.add(rows, ui_hi, sgn * coef * inv_dwj)
                coo.add(rows, ui_lo, -sgn * coef * inv_dwj)
                coo.add(rows, uj_hi, sgn * coef * inv_dwi)
                coo.add(rows, uj_lo, -sgn * coef * inv_dwi)
    mat = coo.build((dofs.n_dofs, dofs.n_dofs))
    if weighted:
        return mat
    inv_vol = 1.0 / np.concatenate(
        [mesh.dual_volumes(i).ravel()[dofs.interior[i]] for i in range(mesh.dim)])
    return sp.diags(inv_vol) @ mat


def _pad_ids(ids, axis):
    pad = [(0, 0)] * ids.ndim
    pad[axis] = (1, 1)
    return np.pad(ids, pad, constant_values=-1)


def _shift_ids(padded, axis, start):
    sl = [slice(None)] * padded.ndim
    sl[axis] = slice(start, start + padded.shape[axis] - 1)
    return padded[tuple(sl)]


def convection_matrix(fluxes: MassFluxSet, scheme="centered",
                      dofs: FaceDofMap | None = None):
    """Matrix of v -> C(rho u) v for frozen fluxes."""
    mesh = fluxes.mesh
    dofs = dofs or FaceDofMap(mesh)
    coo = _Coo()
    for i in range(mesh.dim):
        dof_i = dofs.dof[i].reshape(mesh.faces_shape(i))
        inv_vol = 1.0 / mesh.dual_volumes(i)
        # parallel dual faces, one per cell
        pp = fluxes.parallel_phi[i]
        lo = [slice(None)] * mesh.dim
        hi = [slice(None)] * mesh.dim
        lo[i] = slice(0, mesh.n[i])
        hi[i] = slice(1, mesh.n[i] + 1)
        f_lo, f_hi = dof_i[tuple(lo)], dof_i[tuple(hi)]
        w_lo, w_hi = _advection_weights(pp, scheme)
        for rows, sgn, ivol in ((f_lo, 1.0, inv_vol[tuple(lo)]),
                                (f_hi, -1.0, inv_vol[tuple(hi)])):
            coo.add(rows, f_lo, sgn * ivol * pp * w_lo)
            coo.add(rows, f_hi, sgn * ivol * pp * w_hi)
        for j in range(mesh.dim):
            if j == i:
                continue
            tp = fluxes.transverse_phi[(i, j)]
            rows_lo = _shift_ids(_pad_ids(dof_i, j), j, 0)
            rows_hi = _shift_ids(_pad_ids(dof_i, j), j, 1)
            cols_lo, cols_hi = rows_lo, rows_hi
            w_lo, w_hi = _advection_weights(tp, scheme)
            ivol_lo = _shift_ids(_pad_zero(inv_vol, j), j, 0)
            ivol_hi = _shift_ids(_pad_zero(inv_vol, j), j, 1)
            for rows, sgn, ivol in ((rows_lo, 1.0, ivol_lo), (rows_hi, -1.0, ivol_hi)):
                coo.add(rows, cols_lo, sgn * ivol * tp * w_lo)
                coo.add(rows, cols_hi, sgn * ivol * tp * w_hi)
    return coo.build((dofs.n_dofs, dofs.n_dofs))


def _advection_weights(dual_phi, scheme):
    if scheme == "centered":
        half = np.full_like(dual_phi, 0.5)
        return half, half
    if scheme == "upwind":
        take_lo = dual_phi >= 0.0
        return take_lo.astype(float), (~take_lo).astype(float)
    raise OperatorError(f"unknown advection scheme {scheme!r}")


def transport_matrix(mesh: MacMesh, u: VelocityField):
    """Matrix of rho -> (1/|K|) sum_sigma F_{K,sigma}(rho; u) with upwind
    face densities (linear in rho for frozen u)."""
    coo = _Coo()
    cells = _cell_ids(mesh)
    inv_vol = 1.0 / mesh.cell_volumes
    for i in range(mesh.dim):
        us = u.shaped(i)
        area = mesh.face_measures(i)
        inner = [slice(None)] * mesh.dim
        inner[i] = slice(1, mesh.n[i])
        u_in = us[tuple(inner)]
        a_in = area[tuple(inner)]
        up = a_in * np.maximum(u_in, 0.0)      # donor: cell behind
        dn = a_in * np.maximum(-u_in, 0.0)     # donor: cell ahead
        behind = [slice(None)] * mesh.dim
        ahead = [slice(None)] * mesh.dim
        behind[i] = slice(0, mesh.n[i] - 1)
        ahead[i] = slice(1, mesh.n[i])
        kb, ka = cells[tuple(behind)], cells[tuple(ahead)]
        vb, va = inv_vol[tuple(behind)], inv_vol[tuple(ahead)]
        # flux in +e_i: phi = up * rho_b - dn * rho_a; +phi out of behind cell
        coo.add(kb, kb, vb * up)
        coo.add(kb, ka, -vb * dn)
        coo.add(ka, kb, -va * up)
        coo.add(ka, ka, va * dn)
    return coo.build((mesh.n_cells, mesh.n_cells))


def dump_matrix_coo(matrix, path):
    """Write a sparse matrix as text lines ``row col value``."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
