# two short labelled series
@problemName TinyUni
@timeStamps false
@missing false
@univariate true
@equalLength true
@seriesLength 4
@classLabel true a b

@data
1.0,2.0,3.0,4.0:a
-0.5,0.25,1e-3,7:b
