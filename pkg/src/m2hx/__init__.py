"""Desk-scale multi-task dense prediction (depth, semantics, normals, edges)."""
