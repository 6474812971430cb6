"""Finite element simulation of incompressible biphasic mixtures with a
permeable, dissipative interface."""

from .mesh import Mesh, gen_two_squares, load_mesh, read_mesh, refine_uniform, save_mesh, write_mesh
from .constitutive import InterfaceParams, MaterialParams, StateValidityError
from .assembly import BoundaryConditions, Dirichlet, Impermeable, Pin, Problem, State, Traction
from .solver import SolverConfig, advance, integrate

__version__ = "0.1.0"

__all__ = [
    "Mesh", "gen_two_squares", "load_mesh", "read_mesh", "refine_uniform", "save_mesh", "write_mesh",
    "InterfaceParams", "MaterialParams", "StateValidityError",
    "BoundaryConditions", "Dirichlet", "Impermeable", "Pin", "Problem", "State", "Traction",
    "SolverConfig", "advance", "integrate",
]
