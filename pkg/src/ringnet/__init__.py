"""Small-world ring overlay: address algebra, packet codec, routing,
join and linking protocols, a deterministic simulator, and offline
topology verification."""

__version__ = "0.1.0"
