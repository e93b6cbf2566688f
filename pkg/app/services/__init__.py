# Services Package
