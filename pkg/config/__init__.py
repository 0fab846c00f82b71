# Configuration: environment settings and the typed run schema
