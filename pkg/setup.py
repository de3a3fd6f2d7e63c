from setuptools import setup

# All metadata is contained in setup.cfg
# Keep setup.py for backwards compatibility
if __name__ == '__main__':
    setup()
