"""``python -m qkdkem.kmed``: serve a simulated KME pair over HTTP until stdin closes."""

from .kme import main

if __name__ == "__main__":
    main()
