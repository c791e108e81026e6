"""Pipelined, backpressured batch streaming from storage nodes, with energy accounting."""

__version__ = "0.1.0"
