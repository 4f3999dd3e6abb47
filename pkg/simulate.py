#!/usr/bin/env python3
from gyrolab import main

# e.g. ./simulate.py run --size A --steps 10 --out out
if __name__ == "__main__":
    main()
