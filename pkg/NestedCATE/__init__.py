__author__  = """NestedCATE contributors"""
__version__ = '1.0.0'
