"""Private federated mean estimation with adaptively sized linear sketches."""

__version__ = "0.1.0"
