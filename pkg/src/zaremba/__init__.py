"""Mixed boundary value problems on a half-infinite cylinder, solved directly
and through the change of variables that maps the cylinder onto a punctured
ball, with capacity-based tests of the behaviour at infinity."""

__version__ = "0.1.0"
