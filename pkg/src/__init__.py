"""ElastoInverse - elastic coefficient reconstruction from internal displacement data"""
