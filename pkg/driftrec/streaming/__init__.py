"""Time bookkeeping, prequential evaluation and factor export"""
